use serde::{Deserialize, Serialize};

use super::{TokenizerError, TokenizerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FertilityStats {
    pub tokens_per_word: f64,
    pub tokens_per_char: f64,
    pub corpus_token_count: usize,
    pub corpus_word_count: usize,
    pub corpus_char_count: usize,
}

/// Tokens emitted per whitespace-delimited word and per Unicode scalar.
pub fn fertility(t: &TokenizerModel, corpus: &str) -> Result<FertilityStats, TokenizerError> {
    let words = corpus.split_whitespace().count();
    if words == 0 {
        return Err(TokenizerError::EmptyCorpus);
    }
    let chars = corpus.chars().count();
    let tokens = t.encode(corpus).len();
    Ok(FertilityStats {
        tokens_per_word: tokens as f64 / words as f64,
        tokens_per_char: tokens as f64 / chars as f64,
        corpus_token_count: tokens,
        corpus_word_count: words,
        corpus_char_count: chars,
    })
}
