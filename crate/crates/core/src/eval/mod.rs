//! Metric suite: perplexity, multiple-choice QA, BLEU, sentence embeddings
//! with STS Spearman, and cross-lingual cosine.

mod bleu;
mod mcqa;
mod perplexity;
mod similarity;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::training::TrainError;

pub use bleu::{bleu, bleu_report, bleu_stats, render_translation_prompt, translate, BleuStats};
pub use mcqa::{load_mcqa, mcqa_accuracy, McqaItem, McqaTemplate};
pub use perplexity::{perplexity, perplexity_report, perplexity_windows, WindowNll};
pub use similarity::{
    cosine, crosslingual_report, crosslingual_similarity, load_parallel, load_sts, sentence_embedding, spearman,
    sts_eval, ParallelPair, StsPair, EMBEDDING_TEMPLATE,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus tokenizes to {0} tokens; at least 2 are needed")]
    CorpusTooShort(usize),
    #[error("{0} hypotheses but {1} references")]
    PairMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("correlation undefined for constant input")]
    UndefinedCorrelation,
    #[error("vectors of different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Diagnostics for one evaluated unit. The report scalar is a function of
/// these records alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ItemRecord {
    Window {
        index: usize,
        tokens: usize,
        nll_sum: f64,
    },
    Mcqa {
        index: usize,
        category: String,
        scores: Vec<f64>,
        predicted: Option<usize>,
        gold: usize,
        correct: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Sts {
        index: usize,
        cosine: f64,
        gold: f64,
    },
    Parallel {
        index: usize,
        cosine: f64,
    },
    Bleu {
        index: usize,
        hypothesis: String,
        stats: BleuStats,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub dataset: String,
    pub scalar: f64,
    pub breakdown: BTreeMap<String, f64>,
    pub per_item: Vec<ItemRecord>,
    pub config_hash: String,
    /// Always null: Comet is a learned metric and is not computed here.
    pub comet: Option<f64>,
}

impl EvalReport {
    /// Recomputes the scalar from `per_item`.
    pub fn recompute_scalar(&self) -> Result<f64, EvalError> {
        let items = &self.per_item;
        match self.metric.as_str() {
            "perplexity" => {
                let (mut nll, mut n) = (0.0, 0usize);
                for it in items {
                    if let ItemRecord::Window { tokens, nll_sum, .. } = it {
                        nll += nll_sum;
                        n += tokens;
                    }
                }
                Ok((nll / n as f64).exp())
            }
            "mcqa_accuracy" => {
                let scored: Vec<bool> = items
                    .iter()
                    .filter_map(|it| match it {
                        ItemRecord::Mcqa {
                            correct, error: None, ..
                        } => Some(*correct),
                        _ => None,
                    })
                    .collect();
                Ok(scored.iter().filter(|&&c| c).count() as f64 / scored.len() as f64)
            }
            "sts_spearman" => {
                let (cos, gold): (Vec<f64>, Vec<f64>) = items
                    .iter()
                    .filter_map(|it| match it {
                        ItemRecord::Sts { cosine, gold, .. } => Some((*cosine, *gold)),
                        _ => None,
                    })
                    .unzip();
                spearman(&cos, &gold)
            }
            "crosslingual_cosine" => {
                let cos: Vec<f64> = items
                    .iter()
                    .filter_map(|it| match it {
                        ItemRecord::Parallel { cosine, .. } => Some(*cosine),
                        _ => None,
                    })
                    .collect();
                Ok(cos.iter().sum::<f64>() / cos.len() as f64)
            }
            "bleu" => {
                let mut total = BleuStats::default();
                for it in items {
                    if let ItemRecord::Bleu { stats, .. } = it {
                        total.add(stats);
                    }
                }
                Ok(total.score())
            }
            other => Err(EvalError::InvalidInput(format!("unknown metric {other}"))),
        }
    }
}

/// Digest over length-prefixed parts, so concatenation boundaries matter.
pub fn config_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}
