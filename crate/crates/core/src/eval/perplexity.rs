use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{config_hash, EvalError, EvalReport, ItemRecord};
use crate::checkpoint::fingerprint;
use crate::model::ModelState;
use crate::tensor::Scalar;
use crate::tokenizer::{TokenId, TokenizerModel};
use crate::training::{clm_loss, BatchRow};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowNll {
    /// Predicted tokens in the window (window length − 1).
    pub tokens: usize,
    pub nll_sum: f64,
}

/// Per-window NLL over non-overlapping `context_len` windows of the encoded
/// corpus. A trailing one-token window predicts nothing and is skipped.
pub fn perplexity_windows<T: Scalar>(
    m: &ModelState<T>,
    t: &TokenizerModel,
    corpus: &str,
) -> Result<Vec<WindowNll>, EvalError> {
    let ids = t.encode(corpus);
    if ids.len() < 2 {
        return Err(EvalError::CorpusTooShort(ids.len()));
    }
    let windows: Vec<&[TokenId]> = ids.chunks(m.config().context_len).filter(|w| w.len() >= 2).collect();
    windows
        .par_iter()
        .map(|w| {
            let row = BatchRow::from_block(w, t.pad_id());
            let logits = m.forward(&row.input_ids)?;
            let out = clm_loss(&logits, &row.target_ids, &row.loss_mask)?;
            Ok(WindowNll {
                tokens: out.n_masked,
                nll_sum: out.per_token.iter().sum(),
            })
        })
        .collect()
}

/// `exp` of the mean per-token negative log-likelihood (natural log).
pub fn perplexity<T: Scalar>(m: &ModelState<T>, t: &TokenizerModel, corpus: &str) -> Result<f64, EvalError> {
    let windows = perplexity_windows(m, t, corpus)?;
    let nll: f64 = windows.iter().map(|w| w.nll_sum).sum();
    let n: usize = windows.iter().map(|w| w.tokens).sum();
    Ok((nll / n as f64).exp())
}

pub fn perplexity_report(
    m: &ModelState,
    t: &TokenizerModel,
    corpus: &str,
    dataset: &str,
) -> Result<EvalReport, EvalError> {
    let windows = perplexity_windows(m, t, corpus)?;
    let per_item: Vec<ItemRecord> = windows
        .iter()
        .enumerate()
        .map(|(index, w)| ItemRecord::Window {
            index,
            tokens: w.tokens,
            nll_sum: w.nll_sum,
        })
        .collect();
    let tokens: usize = windows.iter().map(|w| w.tokens).sum();
    let nll: f64 = windows.iter().map(|w| w.nll_sum).sum();
    let mut breakdown = BTreeMap::new();
    breakdown.insert("mean_nll".to_string(), nll / tokens as f64);
    breakdown.insert("predicted_tokens".to_string(), tokens as f64);
    breakdown.insert("windows".to_string(), windows.len() as f64);
    Ok(EvalReport {
        metric: "perplexity".into(),
        dataset: dataset.into(),
        scalar: (nll / tokens as f64).exp(),
        breakdown,
        per_item,
        config_hash: config_hash(&[
            b"perplexity",
            fingerprint(m).as_bytes(),
            t.to_json_string().as_bytes(),
            corpus.as_bytes(),
        ]),
        comet: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamId, TransformerConfig, MIN_VOCAB};
    use ndarray::Array2;

    fn small(vocab: usize) -> ModelState {
        let mut cfg = TransformerConfig::toy(vocab);
        cfg.d_model = 16;
        cfg.d_ff = 32;
        cfg.context_len = 8;
        ModelState::init(cfg).unwrap()
    }

    #[test]
    fn zero_logits_give_vocab_size() {
        let mut m = small(MIN_VOCAB + 40);
        let out = m.param_mut(ParamId::OutputEmbeddings).unwrap();
        *out = Array2::zeros(out.raw_dim());
        let t = TokenizerModel::byte_level();
        let ppl = perplexity(&m, &t, "some text that spans several windows").unwrap();
        assert!((ppl - m.vocab_size() as f64).abs() / ppl < 1e-9);
    }

    #[test]
    fn matches_clm_loss_on_single_window() {
        let m = small(MIN_VOCAB);
        let t = TokenizerModel::byte_level();
        let corpus = "abcdefg";
        let ids = t.encode(corpus);
        let row = BatchRow::from_block(&ids, t.pad_id());
        let logits = m.forward(&ids).unwrap();
        let loss = clm_loss(&logits, &row.target_ids, &row.loss_mask).unwrap().loss;
        let ppl = perplexity(&m, &t, corpus).unwrap();
        assert!((ppl - loss.exp()).abs() / ppl < 1e-6);
    }

    #[test]
    fn too_short_rejected() {
        let m = small(MIN_VOCAB);
        let t = TokenizerModel::byte_level();
        assert!(matches!(perplexity(&m, &t, "a"), Err(EvalError::CorpusTooShort(1))));
    }

    #[test]
    fn report_scalar_recomputes() {
        let m = small(MIN_VOCAB);
        let t = TokenizerModel::byte_level();
        let r = perplexity_report(&m, &t, "hello there, general reader", "toy").unwrap();
        assert_eq!(r.per_item.len(), 4);
        assert!((r.recompute_scalar().unwrap() - r.scalar).abs() < 1e-12);
    }
}
