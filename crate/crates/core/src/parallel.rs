//! Seeded, worker-count-independent parallel sampling.
//!
//! Work of `n` draws is cut into fixed-size chunks. Chunk `i` owns the RNG
//! stream `i` of a ChaCha8 generator seeded with the run seed, so results
//! depend only on `(seed, n)`; workers pick up chunks round-robin and the
//! per-chunk outputs are returned in chunk order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Draws per chunk.
pub const CHUNK: usize = 512;

/// RNG for stream `stream` of run `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `f(rng, count)` over the chunks of `n` draws on `workers` threads.
pub fn run_chunked<T, F>(seed: u64, n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> T + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let size = |i: usize| CHUNK.min(n - i * CHUNK);
    let workers = workers.clamp(1, chunks.max(1));
    if workers == 1 {
        return (0..chunks)
            .map(|i| f(&mut stream_rng(seed, i as u64), size(i)))
            .collect();
    }
    let mut per_worker: Vec<Vec<(usize, T)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                scope.spawn(move || {
                    (w..chunks)
                        .step_by(workers)
                        .map(|i| (i, f(&mut stream_rng(seed, i as u64), size(i))))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out: Vec<(usize, T)> = per_worker.drain(..).flatten().collect();
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, t)| t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn independent_of_worker_count() {
        let draw = |rng: &mut ChaCha8Rng, k: usize| (0..k).map(|_| rng.random::<u32>()).collect::<Vec<_>>();
        let one = run_chunked(7, 2000, 1, draw);
        let four = run_chunked(7, 2000, 4, draw);
        assert_eq!(one, four);
        assert_eq!(one.iter().map(Vec::len).sum::<usize>(), 2000);
        assert_ne!(one, run_chunked(8, 2000, 1, draw));
        assert!(run_chunked(7, 0, 3, draw).is_empty());
    }
}
