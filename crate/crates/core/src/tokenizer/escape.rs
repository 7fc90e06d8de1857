//! Escaping of token byte strings for the JSON tokenizer format.
//!
//! Valid UTF-8 runs are written verbatim, except for the backslash (`\\`) and
//! control characters. Every other byte is written as `\xHH`.

use std::fmt::Write;

pub fn escape_bytes(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for chunk in bytes.utf8_chunks() {
        for ch in chunk.valid().chars() {
            match ch {
                '\\' => out.push_str("\\\\"),
                c if c.is_control() && (c as u32) < 0x80 => {
                    let _ = write!(out, "\\x{:02x}", c as u32);
                }
                c => out.push(c),
            }
        }
        for b in chunk.invalid() {
            let _ = write!(out, "\\x{b:02x}");
        }
    }
    out
}

pub fn unescape_bytes(text: &str) -> Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(text.len());
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'\\') => {
                out.push(b'\\');
                i += 2;
            }
            Some(b'x') => {
                let hex = text
                    .get(i + 2..i + 4)
                    .ok_or_else(|| format!("truncated escape in {text:?}"))?;
                let b = u8::from_str_radix(hex, 16).map_err(|_| format!("bad hex escape \\x{hex} in {text:?}"))?;
                out.push(b);
                i += 4;
            }
            _ => return Err(format!("dangling backslash in {text:?}")),
        }
    }
    Ok(out)
}
