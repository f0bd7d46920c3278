//! Text renderings of raw byte strings.
//!
//! Two encodings are supported:
//!
//! * the hex-escaped form used by every text interface of this crate: bytes in
//!   `0x21..=0x7e` other than `\` are written as-is, everything else becomes
//!   `\xNN`;
//! * the printable byte-level form of GPT-2 style merge files, where each byte
//!   maps to a single printable code point.

use std::collections::HashMap;
use std::fmt::Write;
use std::sync::OnceLock;

/// Returns true for bytes that are written verbatim by [`escape`].
pub fn is_plain(byte: u8) -> bool {
    (0x21..=0x7e).contains(&byte) && byte != b'\\'
}

/// Hex-escapes a byte string.
pub fn escape(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        if is_plain(b) {
            out.push(b as char);
        } else {
            write!(out, "\\x{b:02x}").unwrap();
        }
    }
    out
}

/// Inverse of [`escape`]. Also accepts unescaped non-ASCII UTF-8, which is
/// passed through as its UTF-8 bytes. Returns `None` on a malformed escape.
pub fn unescape(text: &str) -> Option<Vec<u8>> {
    let mut out = Vec::with_capacity(text.len());
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            if bytes.get(i + 1) != Some(&b'x') || i + 4 > bytes.len() {
                return None;
            }
            let hex = std::str::from_utf8(&bytes[i + 2..i + 4]).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Some(out)
}

/// GPT-2 byte order: the printable bytes first, then the rest in numeric
/// order. Token ids of a GPT-2 vocabulary follow this order for the 256 base
/// tokens.
pub fn byte_level_order() -> &'static [u8; 256] {
    static ORDER: OnceLock<[u8; 256]> = OnceLock::new();
    ORDER.get_or_init(|| {
        let mut order = [0u8; 256];
        let mut n = 0;
        for b in 0..=255u8 {
            if is_byte_level_printable(b) {
                order[n] = b;
                n += 1;
            }
        }
        for b in 0..=255u8 {
            if !is_byte_level_printable(b) {
                order[n] = b;
                n += 1;
            }
        }
        order
    })
}

fn is_byte_level_printable(b: u8) -> bool {
    matches!(b, b'!'..=b'~' | 0xa1..=0xac | 0xae..=0xff)
}

fn byte_to_char_table() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let mut shifted = 0u32;
        for b in 0..=255u8 {
            table[b as usize] = if is_byte_level_printable(b) {
                char::from(b)
            } else {
                shifted += 1;
                char::from_u32(255 + shifted).unwrap()
            };
        }
        table
    })
}

fn char_to_byte_table() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        byte_to_char_table()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect()
    })
}

/// Renders bytes in the printable byte-level form (e.g. space becomes `Ġ`).
pub fn to_byte_level(bytes: &[u8]) -> String {
    let table = byte_to_char_table();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

/// Decodes the printable byte-level form back to bytes.
pub fn from_byte_level(text: &str) -> Option<Vec<u8>> {
    let table = char_to_byte_table();
    text.chars().map(|c| table.get(&c).copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn escapes_whitespace_and_backslash() {
        assert_eq!(escape(b"a b\\\n"), "a\\x20b\\x5c\\x0a");
        assert_eq!(escape(b""), "");
    }

    #[test]
    fn rejects_truncated_escape() {
        assert_eq!(unescape("\\x4"), None);
        assert_eq!(unescape("\\y41"), None);
        assert_eq!(unescape("\\xzz"), None);
    }

    #[test]
    fn byte_level_matches_gpt2_conventions() {
        assert_eq!(to_byte_level(b" the"), "\u{120}the");
        assert_eq!(to_byte_level(b"\n"), "\u{10a}");
        let order = byte_level_order();
        assert_eq!(order[0], b'!');
        assert_eq!(order[83], b't');
        assert_eq!(order[188], 0);
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..=255u8).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn escape_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let text = escape(&bytes);
            prop_assert!(!text.contains(char::is_whitespace));
            prop_assert_eq!(unescape(&text), Some(bytes.clone()));
            prop_assert_eq!(from_byte_level(&to_byte_level(&bytes)), Some(bytes));
        }
    }
}
