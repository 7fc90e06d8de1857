//! Corpus and instruction-set ingestion, and packing of token streams into
//! fixed-length training blocks.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not valid UTF-8 (byte offset {offset})")]
    EncodingError { path: PathBuf, offset: usize },
    #[error("line {line}: malformed JSON: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: {message}")]
    ValidationError { line: usize, message: String },
}

/// Reads a UTF-8 text file, strips a leading byte-order mark and normalises to
/// NFC. An empty file yields an empty string.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<String, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_corpus(&bytes).map_err(|offset| DataError::EncodingError {
        path: path.to_path_buf(),
        offset,
    })
}

/// Byte-level core of [`load_corpus`]; the error is the offset of the first
/// invalid byte.
pub fn decode_corpus(bytes: &[u8]) -> Result<String, usize> {
    let text = std::str::from_utf8(bytes).map_err(|e| e.valid_up_to())?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    Ok(text.nfc().collect())
}

/// Documents are separated by one or more blank lines.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    docs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedDataset {
    pub context_len: usize,
    pub blocks: Vec<Vec<TokenId>>,
    /// Tokens in the joined stream, separators included.
    pub source_token_count: usize,
    pub dropped_tail: usize,
}

impl PackedDataset {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }
}

/// Chunks a single token stream into `context_len` blocks, dropping the
/// partial tail.
pub fn pack_sequences(ids: &[TokenId], context_len: usize, eos_id: TokenId) -> PackedDataset {
    pack_documents(std::slice::from_ref(&ids.to_vec()), context_len, eos_id)
}

/// Joins documents with `eos_id` between consecutive documents, then chunks.
pub fn pack_documents(docs: &[Vec<TokenId>], context_len: usize, eos_id: TokenId) -> PackedDataset {
    assert!(context_len >= 2, "context_len must be at least 2");
    let mut stream = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            stream.push(eos_id);
        }
        stream.extend_from_slice(doc);
    }
    let blocks: Vec<Vec<TokenId>> = stream.chunks_exact(context_len).map(<[TokenId]>::to_vec).collect();
    PackedDataset {
        context_len,
        dropped_tail: stream.len() - blocks.len() * context_len,
        source_token_count: stream.len(),
        blocks,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

#[derive(Deserialize)]
struct RawInstruction {
    system: Option<String>,
    prompt: Option<String>,
    response: Option<String>,
    #[serde(default)]
    tags: Vec<String>,
}

/// Parses JSON Lines, one value per non-blank line. Line numbers are 1-based.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<(usize, T)>, DataError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| {
            let message = e.to_string();
            if e.is_data() {
                DataError::ValidationError { line: i + 1, message }
            } else {
                DataError::ParseError { line: i + 1, message }
            }
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|e| DataError::EncodingError {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

pub fn parse_instructions(text: &str) -> Result<Vec<InstructionExample>, DataError> {
    parse_jsonl::<RawInstruction>(text)?
        .into_iter()
        .map(|(line, raw)| {
            let invalid = |message: &str| DataError::ValidationError {
                line,
                message: message.to_string(),
            };
            let prompt = raw.prompt.ok_or_else(|| invalid("missing \"prompt\""))?;
            let response = raw.response.ok_or_else(|| invalid("missing \"response\""))?;
            if response.is_empty() {
                return Err(invalid("empty \"response\""));
            }
            Ok(InstructionExample {
                system: raw.system,
                prompt: prompt.nfc().collect(),
                response: response.nfc().collect(),
                tags: raw.tags,
            })
        })
        .collect()
}

pub fn load_instructions(path: impl AsRef<Path>) -> Result<Vec<InstructionExample>, DataError> {
    parse_instructions(&read_text(path)?)
}

pub fn write_instructions(examples: &[InstructionExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("serializable"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    #[test]
    fn bom_stripped_and_empty_file_ok() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"\xEF\xBB\xBFhello").unwrap();
        assert_eq!(load_corpus(f.path()).unwrap(), "hello");
        let empty = tempfile::NamedTempFile::new().unwrap();
        assert_eq!(load_corpus(empty.path()).unwrap(), "");
    }

    #[test]
    fn invalid_utf8_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"ok\xff").unwrap();
        assert!(matches!(
            load_corpus(f.path()),
            Err(DataError::EncodingError { offset: 2, .. })
        ));
    }

    #[test]
    fn mixed_script_nfc_sample_is_lossless() {
        let sample = "Persian text: زبان فارسی یکی از زبان‌های هندواروپایی است.\nEnglish line.\n";
        assert_eq!(decode_corpus(sample.as_bytes()).unwrap().as_bytes(), sample.as_bytes());
    }

    #[test]
    fn nfc_composes() {
        // e + combining acute
        assert_eq!(decode_corpus("e\u{301}".as_bytes()).unwrap(), "\u{e9}");
    }

    #[test]
    fn documents_split_on_blank_lines() {
        let docs = split_documents("a b\nc\n\n\nd\r\n\r\ne");
        assert_eq!(docs, vec!["a b\nc", "d", "e"]);
    }

    #[test]
    fn packing_arithmetic() {
        let ids: Vec<TokenId> = (0..10).collect();
        let p = pack_sequences(&ids, 4, 99);
        assert_eq!(p.n_blocks(), 2);
        assert_eq!(p.dropped_tail, 2);
        let short = pack_sequences(&ids[..3], 4, 99);
        assert_eq!(short.n_blocks(), 0);
        assert_eq!(short.dropped_tail, 3);
    }

    #[test]
    fn separators_are_ordinary_tokens() {
        let docs = vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9]];
        let p = pack_documents(&docs, 3, 0);
        assert_eq!(p.source_token_count, 9 + 2);
        let flat: Vec<TokenId> = p.blocks.concat();
        assert_eq!(flat, vec![1, 2, 3, 0, 4, 5, 0, 6, 7]);
        assert_eq!(flat.iter().filter(|&&t| t == 0).count(), 2);
    }

    #[test]
    fn instructions_in_order() {
        let text = r#"{"prompt":"a","response":"1"}
{"prompt":"b","response":"2","system":"s","tags":["qa"]}
{"prompt":"c","response":"3"}
"#;
        let ex = parse_instructions(text).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[1].prompt, "b");
        assert_eq!(ex[1].system.as_deref(), Some("s"));
        assert_eq!(ex[1].tags, vec!["qa"]);
    }

    #[test]
    fn missing_response_reports_line() {
        let text = "{\"prompt\":\"a\",\"response\":\"1\"}\n{\"prompt\":\"b\"}\n";
        assert!(matches!(
            parse_instructions(text),
            Err(DataError::ValidationError { line: 2, .. })
        ));
        let empty = "{\"prompt\":\"a\",\"response\":\"\"}\n";
        assert!(matches!(
            parse_instructions(empty),
            Err(DataError::ValidationError { line: 1, .. })
        ));
        let broken = "{\"prompt\":\"a\",\"response\":\"1\"}\n\n{oops\n";
        assert!(matches!(
            parse_instructions(broken),
            Err(DataError::ParseError { line: 3, .. })
        ));
    }

    #[test]
    fn crlf_parses_like_lf() {
        let lf = "{\"prompt\":\"سلام\",\"response\":\"درود\"}\n{\"prompt\":\"x\",\"response\":\"y\"}\n";
        let crlf = lf.replace('\n', "\r\n");
        assert_eq!(parse_instructions(lf).unwrap(), parse_instructions(&crlf).unwrap());
    }

    #[test]
    fn reserialization_is_semantically_identical() {
        let text = "{\"prompt\":\"a\",\"response\":\"1\",\"tags\":[\"t\"]}\n{\"system\":\"s\",\"prompt\":\"b\",\"response\":\"2\"}\n";
        let ex = parse_instructions(text).unwrap();
        assert_eq!(parse_instructions(&write_instructions(&ex)).unwrap(), ex);
    }

    proptest! {
        #[test]
        fn packing_conserves_tokens(lens in proptest::collection::vec(0usize..40, 0..8), ctx in 2usize..16) {
            let docs: Vec<Vec<TokenId>> = lens.iter().map(|&n| (0..n as TokenId).collect()).collect();
            let p = pack_documents(&docs, ctx, 999);
            let expected = lens.iter().sum::<usize>() + lens.len().saturating_sub(1);
            prop_assert_eq!(p.source_token_count, expected);
            prop_assert_eq!(p.n_blocks() * ctx + p.dropped_tail, p.source_token_count);
            prop_assert!(p.blocks.iter().all(|b| b.len() == ctx));
        }
    }
}
