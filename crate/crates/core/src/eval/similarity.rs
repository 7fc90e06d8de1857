use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{config_hash, EvalError, EvalReport, ItemRecord};
use crate::checkpoint::fingerprint;
use crate::data::{parse_jsonl, read_text, DataError};
use crate::model::{ModelError, ModelState};
use crate::tokenizer::TokenizerModel;

pub const EMBEDDING_TEMPLATE: &str = "Summarize sentence \"{text}\" in one word:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    #[serde(rename = "a")]
    pub sentence_a: String,
    #[serde(rename = "b")]
    pub sentence_b: String,
    #[serde(rename = "score")]
    pub gold_score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub src: String,
    pub tgt: String,
}

pub fn load_sts(path: impl AsRef<Path>) -> Result<Vec<StsPair>, DataError> {
    let rows = parse_jsonl::<StsPair>(&read_text(path)?)?;
    rows.into_iter()
        .map(|(line, p)| {
            if p.gold_score.is_finite() {
                Ok(p)
            } else {
                Err(DataError::ValidationError {
                    line,
                    message: "score must be finite".into(),
                })
            }
        })
        .collect()
}

pub fn load_parallel(path: impl AsRef<Path>) -> Result<Vec<ParallelPair>, DataError> {
    Ok(parse_jsonl::<ParallelPair>(&read_text(path)?)?
        .into_iter()
        .map(|(_, p)| p)
        .collect())
}

/// Final hidden state at a pad token appended to the rendered template.
pub fn sentence_embedding(m: &ModelState, t: &TokenizerModel, text: &str) -> Result<Array1<f64>, EvalError> {
    let mut ids = t.encode(&EMBEDDING_TEMPLATE.replace("{text}", text));
    ids.push(t.pad_id());
    let ctx = m.config().context_len;
    if ids.len() > ctx {
        return Err(ModelError::ContextOverflow {
            len: ids.len(),
            context_len: ctx,
        }
        .into());
    }
    let h = m.hidden_states(&ids)?;
    Ok(h.row(ids.len() - 1).mapv(f64::from))
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::LengthMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::InvalidInput("spearman needs at least two points".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

fn embed_all(m: &ModelState, t: &TokenizerModel, texts: &[&str]) -> Result<Vec<Array1<f64>>, EvalError> {
    texts.par_iter().map(|s| sentence_embedding(m, t, s)).collect()
}

fn pair_cosines(m: &ModelState, t: &TokenizerModel, pairs: &[(&str, &str)]) -> Result<Vec<f64>, EvalError> {
    let a = embed_all(m, t, &pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let b = embed_all(m, t, &pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    a.iter()
        .zip(&b)
        .map(|(u, v)| cosine(u.as_slice().expect("contiguous"), v.as_slice().expect("contiguous")))
        .collect()
}

pub fn sts_eval(m: &ModelState, t: &TokenizerModel, pairs: &[StsPair], dataset: &str) -> Result<EvalReport, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::InvalidInput("STS needs at least two pairs".into()));
    }
    let texts: Vec<(&str, &str)> = pairs
        .iter()
        .map(|p| (p.sentence_a.as_str(), p.sentence_b.as_str()))
        .collect();
    let cos = pair_cosines(m, t, &texts)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold_score).collect();
    let rho = spearman(&cos, &gold)?;
    let mut breakdown = BTreeMap::new();
    breakdown.insert("mean_cosine".into(), cos.iter().sum::<f64>() / cos.len() as f64);
    Ok(EvalReport {
        metric: "sts_spearman".into(),
        dataset: dataset.into(),
        scalar: rho,
        breakdown,
        per_item: cos
            .iter()
            .zip(&gold)
            .enumerate()
            .map(|(index, (&cosine, &gold))| ItemRecord::Sts { index, cosine, gold })
            .collect(),
        config_hash: config_hash(&[
            b"sts_spearman",
            fingerprint(m).as_bytes(),
            t.to_json_string().as_bytes(),
            &serde_json::to_vec(pairs).expect("serializable"),
        ]),
        comet: None,
    })
}

pub fn crosslingual_similarity(
    m: &ModelState,
    t: &TokenizerModel,
    parallel: &[(String, String)],
) -> Result<f64, EvalError> {
    let pairs: Vec<ParallelPair> = parallel
        .iter()
        .map(|(s, g)| ParallelPair {
            src: s.clone(),
            tgt: g.clone(),
        })
        .collect();
    Ok(crosslingual_report(m, t, &pairs, "")?.scalar)
}

pub fn crosslingual_report(
    m: &ModelState,
    t: &TokenizerModel,
    pairs: &[ParallelPair],
    dataset: &str,
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::InvalidInput("no parallel pairs".into()));
    }
    let texts: Vec<(&str, &str)> = pairs.iter().map(|p| (p.src.as_str(), p.tgt.as_str())).collect();
    let cos = pair_cosines(m, t, &texts)?;
    Ok(EvalReport {
        metric: "crosslingual_cosine".into(),
        dataset: dataset.into(),
        scalar: cos.iter().sum::<f64>() / cos.len() as f64,
        breakdown: BTreeMap::new(),
        per_item: cos
            .iter()
            .enumerate()
            .map(|(index, &cosine)| ItemRecord::Parallel { index, cosine })
            .collect(),
        config_hash: config_hash(&[
            b"crosslingual_cosine",
            fingerprint(m).as_bytes(),
            t.to_json_string().as_bytes(),
            &serde_json::to_vec(pairs).expect("serializable"),
        ]),
        comet: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TransformerConfig, MIN_VOCAB};
    use proptest::prelude::*;

    fn model() -> ModelState {
        let mut cfg = TransformerConfig::toy(MIN_VOCAB);
        cfg.d_model = 16;
        cfg.d_ff = 32;
        ModelState::init(cfg).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - 0.974_631_846).abs() < 1e-8);
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(EvalError::ZeroVector)));
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &x).unwrap(), 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        let tie = spearman(&[1.0, 2.0, 2.0, 3.0], &x).unwrap();
        assert!((tie - 4.5 / 22.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            spearman(&[1.0, 1.0], &[1.0, 2.0]),
            Err(EvalError::UndefinedCorrelation)
        ));
    }

    #[test]
    fn embeddings_shape_and_determinism() {
        let m = model();
        let t = TokenizerModel::byte_level();
        let a = sentence_embedding(&m, &t, "hello").unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, sentence_embedding(&m, &t, "hello").unwrap());
        assert_ne!(a, sentence_embedding(&m, &t, "goodbye").unwrap());
        let long = "x".repeat(200);
        assert!(matches!(
            sentence_embedding(&m, &t, &long),
            Err(EvalError::Model(ModelError::ContextOverflow { .. }))
        ));
    }

    #[test]
    fn sts_edge_and_invariance() {
        let m = model();
        let t = TokenizerModel::byte_level();
        let same: Vec<StsPair> = ["a", "b", "c"]
            .iter()
            .map(|s| StsPair {
                sentence_a: s.to_string(),
                sentence_b: s.to_string(),
                gold_score: 5.0,
            })
            .collect();
        assert!(matches!(
            sts_eval(&m, &t, &same, ""),
            Err(EvalError::UndefinedCorrelation)
        ));

        let mut pairs: Vec<StsPair> = [
            ("cat", "dog", 3.0),
            ("sun", "moon", 2.0),
            ("a b", "a c", 4.5),
            ("xyz", "q", 1.0),
        ]
        .iter()
        .map(|(a, b, g)| StsPair {
            sentence_a: a.to_string(),
            sentence_b: b.to_string(),
            gold_score: *g,
        })
        .collect();
        let r1 = sts_eval(&m, &t, &pairs, "").unwrap();
        assert_eq!(r1.recompute_scalar().unwrap(), r1.scalar);
        pairs.reverse();
        for p in &mut pairs {
            p.gold_score = p.gold_score * 2.0 + 1.0;
        }
        let r2 = sts_eval(&m, &t, &pairs, "").unwrap();
        assert!((r1.scalar - r2.scalar).abs() < 1e-12);
    }

    #[test]
    fn crosslingual_consistency() {
        let m = model();
        let t = TokenizerModel::byte_level();
        let same = vec![("سلام".to_string(), "سلام".to_string())];
        assert!((crosslingual_similarity(&m, &t, &same).unwrap() - 1.0).abs() < 1e-9);
        let pairs = vec![
            ParallelPair {
                src: "سلام".into(),
                tgt: "hello".into(),
            },
            ParallelPair {
                src: "کتاب".into(),
                tgt: "book".into(),
            },
        ];
        let r = crosslingual_report(&m, &t, &pairs, "").unwrap();
        assert!((r.recompute_scalar().unwrap() - r.scalar).abs() < 1e-15);
        let single = crosslingual_report(&m, &t, &pairs[..1], "").unwrap();
        assert_eq!(
            single.scalar,
            match &r.per_item[0] {
                ItemRecord::Parallel { cosine, .. } => *cosine,
                _ => unreachable!(),
            }
        );
    }

    proptest! {
        #[test]
        fn spearman_monotone_invariant(xs in proptest::collection::vec(-100.0f64..100.0, 3..20), seed in 0u64..1000) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + (i as u64 * seed % 7) as f64).collect();
            if let Ok(rho) = spearman(&xs, &ys) {
                let tx: Vec<f64> = xs.iter().map(|x| x.powi(3) * 2.0 + 1.0).collect();
                prop_assert!((spearman(&tx, &ys).unwrap() - rho).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&rho));
            }
        }
    }
}
