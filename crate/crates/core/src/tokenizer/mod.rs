//! Byte-level BPE tokenizers: training, vocabulary union, encoding and
//! fertility statistics.
//!
//! Every tokenizer starts from the same 256 single-byte tokens, so any UTF-8
//! string can be encoded without an unknown-token path. Learned merges are
//! applied within whitespace-led pieces (see [`pretokenize`]) in the order
//! they were learned.

mod escape;
mod fertility;
mod merge;
mod train;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use escape::{escape_bytes, unescape_bytes};
pub use fertility::{fertility, FertilityStats};
pub use merge::{merge_vocabularies, MergeReport};
pub use train::{train_bpe, BpeTrainStats};

pub type TokenId = u32;

/// Number of single-byte tokens at the bottom of every vocabulary.
pub const BYTE_ALPHABET: usize = 256;

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("tokenizers do not share the 256-token byte alphabet: {0}")]
    IncompatibleAlphabets(String),
    #[error("unknown token id {id} (vocab size {vocab_size})")]
    UnknownTokenId { id: TokenId, vocab_size: usize },
    #[error("invalid tokenizer: {0}")]
    Invalid(String),
    #[error("tokenizer io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tokenizer json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub unk: TokenId,
}

impl SpecialTokens {
    pub fn ids(&self) -> [TokenId; 4] {
        [self.bos, self.eos, self.pad, self.unk]
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids().contains(&id)
    }
}

/// An immutable byte-level BPE tokenizer.
///
/// Token ids are contiguous from zero. Special tokens carry display names in
/// the vocabulary but are never produced by [`TokenizerModel::encode`] and are
/// dropped by [`TokenizerModel::decode`].
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    special: SpecialTokens,
    lookup: HashMap<Vec<u8>, TokenId>,
    merge_ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges && self.special == other.special
    }
}

/// Splits text into pieces that start at each whitespace run, so whitespace
/// stays attached to the word that follows it.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut prev_ws: Option<bool> = None;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if ws && prev_ws == Some(false) {
            pieces.push(&text[start..i]);
            start = i;
        }
        prev_ws = Some(ws);
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

impl TokenizerModel {
    /// The 256 byte tokens followed by bos, eos, pad and unk. No merges.
    pub fn byte_level() -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let base = tokens.len() as TokenId;
        for name in [BOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN] {
            tokens.push(name.as_bytes().to_vec());
        }
        let special = SpecialTokens {
            bos: base,
            eos: base + 1,
            pad: base + 2,
            unk: base + 3,
        };
        Self::from_parts(tokens, Vec::new(), special).expect("byte-level tokenizer is valid")
    }

    /// Builds a tokenizer from raw parts, validating every invariant.
    pub fn from_parts(
        tokens: Vec<Vec<u8>>,
        merges: Vec<(TokenId, TokenId)>,
        special: SpecialTokens,
    ) -> Result<Self, TokenizerError> {
        let n = tokens.len() as TokenId;
        let sp = special.ids();
        for (i, id) in sp.iter().enumerate() {
            if *id >= n {
                return Err(TokenizerError::Invalid(format!(
                    "special token id {id} outside vocab of {n}"
                )));
            }
            if sp[..i].contains(id) {
                return Err(TokenizerError::Invalid(format!("special token id {id} used twice")));
            }
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, bytes) in tokens.iter().enumerate() {
            let id = id as TokenId;
            if special.contains(id) {
                continue;
            }
            if bytes.is_empty() {
                return Err(TokenizerError::Invalid(format!("token {id} is empty")));
            }
            if lookup.insert(bytes.clone(), id).is_some() {
                return Err(TokenizerError::Invalid(format!(
                    "duplicate token {:?}",
                    escape_bytes(bytes)
                )));
            }
        }
        if !(0..=255u8).all(|b| lookup.contains_key(&[b][..])) {
            return Err(TokenizerError::Invalid("vocab lacks the 256 single-byte tokens".into()));
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            for side in [l, r] {
                if side >= n || special.contains(side) {
                    return Err(TokenizerError::Invalid(format!(
                        "merge {rank} references invalid token {side}"
                    )));
                }
            }
            let mut joined = tokens[l as usize].clone();
            joined.extend_from_slice(&tokens[r as usize]);
            let out = *lookup.get(&joined).ok_or_else(|| {
                TokenizerError::Invalid(format!(
                    "merge {rank} output {:?} missing from vocab",
                    escape_bytes(&joined)
                ))
            })?;
            if merge_ranks.insert((l, r), (rank, out)).is_some() {
                return Err(TokenizerError::Invalid(format!("merge {rank} is a duplicate")));
            }
        }
        Ok(Self {
            tokens,
            merges,
            special,
            lookup,
            merge_ranks,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn bos_id(&self) -> TokenId {
        self.special.bos
    }

    pub fn eos_id(&self) -> TokenId {
        self.special.eos
    }

    pub fn pad_id(&self) -> TokenId {
        self.special.pad
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Id of a non-special token with exactly these bytes.
    pub fn token_id(&self, bytes: &[u8]) -> Option<TokenId> {
        self.lookup.get(bytes).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special.contains(id)
    }

    /// True when every single byte maps to its own token.
    pub fn has_byte_alphabet(&self) -> bool {
        (0..=255u8).all(|b| self.lookup.contains_key(&[b][..]))
    }

    pub(crate) fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len());
        for piece in pretokenize(text) {
            self.encode_piece(piece.as_bytes(), &mut out);
        }
        out
    }

    fn encode_piece(&self, bytes: &[u8], out: &mut Vec<TokenId>) {
        let mut ids: Vec<TokenId> = bytes.iter().map(|b| self.lookup[&[*b][..]]).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])))
                .min_by_key(|(rank, _)| *rank)
                .copied();
            let Some((rank, merged)) = best else { break };
            let (l, r) = self.merges[rank];
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        out.extend(ids);
    }

    /// Concatenates token bytes, skipping special tokens. Byte sequences that
    /// are not valid UTF-8 are replaced lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.tokens.get(id as usize).ok_or(TokenizerError::UnknownTokenId {
                id,
                vocab_size: self.tokens.len(),
            })?;
            if !self.special.contains(id) {
                out.extend_from_slice(bytes);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> TokenizerJson {
        TokenizerJson {
            vocab: self.tokens.iter().map(|t| escape_bytes(t)).collect(),
            merges: self
                .merges
                .iter()
                .map(|&(l, r)| {
                    [
                        escape_bytes(&self.tokens[l as usize]),
                        escape_bytes(&self.tokens[r as usize]),
                    ]
                })
                .collect(),
            special_tokens: Some(self.special),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("tokenizer json serializes")
    }

    pub fn from_json(doc: TokenizerJson) -> Result<Self, TokenizerError> {
        let mut tokens = doc
            .vocab
            .iter()
            .map(|s| unescape_bytes(s).map_err(TokenizerError::Invalid))
            .collect::<Result<Vec<_>, _>>()?;
        let special = match doc.special_tokens {
            Some(sp) => sp,
            None => {
                let find = |name: &str| {
                    tokens
                        .iter()
                        .position(|t| t == name.as_bytes())
                        .map(|i| i as TokenId)
                        .ok_or_else(|| TokenizerError::Invalid(format!("missing special token {name}")))
                };
                let (bos, eos, unk) = (find(BOS_TOKEN)?, find(EOS_TOKEN)?, find(UNK_TOKEN)?);
                let pad = match find(PAD_TOKEN) {
                    Ok(id) => id,
                    Err(_) => {
                        tokens.push(PAD_TOKEN.as_bytes().to_vec());
                        (tokens.len() - 1) as TokenId
                    }
                };
                SpecialTokens { bos, eos, pad, unk }
            }
        };
        let index: HashMap<&[u8], TokenId> = tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| !special.contains(*i as TokenId))
            .map(|(i, t)| (t.as_slice(), i as TokenId))
            .collect();
        let mut merges = Vec::with_capacity(doc.merges.len());
        for [l, r] in &doc.merges {
            let resolve = |s: &String| -> Result<TokenId, TokenizerError> {
                let bytes = unescape_bytes(s).map_err(TokenizerError::Invalid)?;
                index
                    .get(bytes.as_slice())
                    .copied()
                    .ok_or_else(|| TokenizerError::Invalid(format!("merge references unknown token {s:?}")))
            };
            merges.push((resolve(l)?, resolve(r)?));
        }
        drop(index);
        Self::from_parts(tokens, merges, special)
    }

    pub fn from_json_str(text: &str) -> Result<Self, TokenizerError> {
        Self::from_json(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }
}

/// On-disk form of a tokenizer.
///
/// `special_tokens` may be omitted, in which case the specials are located by
/// their display names and a pad token is appended when absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerJson {
    pub vocab: Vec<String>,
    pub merges: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub special_tokens: Option<SpecialTokens>,
}
