use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{config_hash, EvalError, EvalReport, ItemRecord};
use crate::checkpoint::fingerprint;
use crate::data::{parse_jsonl, read_text, DataError};
use crate::model::ModelState;
use crate::tensor::log_sum_exp;
use crate::tokenizer::{TokenId, TokenizerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqaItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub question: String,
    pub candidates: Vec<String>,
    pub gold_index: usize,
    #[serde(default = "default_category")]
    pub category: String,
}

fn default_category() -> String {
    "all".into()
}

/// `{context}` and `{question}` are substituted. Items without a context use
/// `no_context`. Candidates are appended after a single space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaTemplate {
    pub with_context: String,
    pub no_context: String,
}

impl Default for McqaTemplate {
    fn default() -> Self {
        Self {
            with_context: "{context}\nQuestion: {question}\nAnswer:".into(),
            no_context: "Question: {question}\nAnswer:".into(),
        }
    }
}

impl McqaTemplate {
    pub fn render(&self, item: &McqaItem) -> String {
        let tpl = match &item.context {
            Some(_) => &self.with_context,
            None => &self.no_context,
        };
        tpl.replace("{context}", item.context.as_deref().unwrap_or(""))
            .replace("{question}", &item.question)
    }
}

pub fn load_mcqa(path: impl AsRef<Path>) -> Result<Vec<McqaItem>, DataError> {
    let items = parse_jsonl::<McqaItem>(&read_text(path)?)?;
    items
        .into_iter()
        .map(|(line, item)| {
            if item.candidates.len() < 2 {
                return Err(DataError::ValidationError {
                    line,
                    message: "need at least two candidates".into(),
                });
            }
            if item.gold_index >= item.candidates.len() {
                return Err(DataError::ValidationError {
                    line,
                    message: format!(
                        "gold_index {} out of range for {} candidates",
                        item.gold_index,
                        item.candidates.len()
                    ),
                });
            }
            Ok(item)
        })
        .collect()
}

/// Mean log-probability of `cont` following `prompt`. When the pair exceeds
/// the context window the oldest prompt tokens are dropped.
fn continuation_score(m: &ModelState, prompt: &[TokenId], cont: &[TokenId]) -> Result<f64, EvalError> {
    let ctx = m.config().context_len;
    if cont.len() >= ctx {
        return Err(EvalError::InvalidInput(format!(
            "candidate of {} tokens does not fit context {ctx}",
            cont.len()
        )));
    }
    let keep = prompt.len().min(ctx - cont.len());
    let mut ids = prompt[prompt.len() - keep..].to_vec();
    let start = ids.len();
    ids.extend_from_slice(cont);
    let logits = m.forward(&ids[..ids.len() - 1])?;
    let mut total = 0.0;
    for (k, &tok) in cont.iter().enumerate() {
        let row = logits.row(start + k - 1);
        total += row[tok as usize] as f64 - log_sum_exp(row);
    }
    Ok(total / cont.len() as f64)
}

/// Index of the first maximum.
fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn mcqa_accuracy(
    m: &ModelState,
    t: &TokenizerModel,
    items: &[McqaItem],
    template: &McqaTemplate,
    dataset: &str,
) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::InvalidInput("no MCQA items".into()));
    }
    let records: Vec<ItemRecord> = items
        .par_iter()
        .enumerate()
        .map(|(index, item)| {
            let mut prompt = vec![t.bos_id()];
            prompt.extend(t.encode(&template.render(item)));
            let mut scores = Vec::with_capacity(item.candidates.len());
            let mut error = None;
            for (ci, cand) in item.candidates.iter().enumerate() {
                if t.encode(cand).is_empty() {
                    error = Some(format!("candidate {ci} tokenizes empty"));
                    break;
                }
                match continuation_score(m, &prompt, &t.encode(&format!(" {cand}"))) {
                    Ok(s) => scores.push(s),
                    Err(e) => {
                        error = Some(format!("candidate {ci}: {e}"));
                        break;
                    }
                }
            }
            let predicted = error.is_none().then(|| argmax_first(&scores));
            ItemRecord::Mcqa {
                index,
                category: item.category.clone(),
                correct: predicted == Some(item.gold_index),
                scores,
                predicted,
                gold: item.gold_index,
                error,
            }
        })
        .collect();

    let mut per_cat: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut errors = 0usize;
    for r in &records {
        if let ItemRecord::Mcqa {
            category,
            correct,
            error,
            ..
        } = r
        {
            if error.is_some() {
                errors += 1;
                continue;
            }
            let e = per_cat.entry(category.clone()).or_default();
            e.0 += usize::from(*correct);
            e.1 += 1;
        }
    }
    let scored: usize = per_cat.values().map(|v| v.1).sum();
    if scored == 0 {
        return Err(EvalError::InvalidInput("every item failed to score".into()));
    }
    let correct: usize = per_cat.values().map(|v| v.0).sum();
    let mut breakdown: BTreeMap<String, f64> = per_cat
        .iter()
        .map(|(k, (c, n))| (k.clone(), *c as f64 / *n as f64))
        .collect();
    breakdown.insert("_item_errors".into(), errors as f64);
    breakdown.insert("_scored".into(), scored as f64);
    let data = serde_json::to_vec(items).expect("serializable");
    let tpl = serde_json::to_vec(template).expect("serializable");
    Ok(EvalReport {
        metric: "mcqa_accuracy".into(),
        dataset: dataset.into(),
        scalar: correct as f64 / scored as f64,
        breakdown,
        per_item: records,
        config_hash: config_hash(&[
            b"mcqa_accuracy",
            fingerprint(m).as_bytes(),
            t.to_json_string().as_bytes(),
            &data,
            &tpl,
        ]),
        comet: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TransformerConfig, MIN_VOCAB};

    fn item(cands: &[&str], gold: usize, cat: &str) -> McqaItem {
        McqaItem {
            context: None,
            question: "q?".into(),
            candidates: cands.iter().map(|s| s.to_string()).collect(),
            gold_index: gold,
            category: cat.into(),
        }
    }

    fn model() -> ModelState {
        let mut cfg = TransformerConfig::toy(MIN_VOCAB);
        cfg.d_model = 16;
        cfg.d_ff = 32;
        ModelState::init(cfg).unwrap()
    }

    #[test]
    fn identical_candidates_tie_to_first() {
        let t = TokenizerModel::byte_level();
        let r = mcqa_accuracy(
            &model(),
            &t,
            &[item(&["same", "same"], 0, "a")],
            &McqaTemplate::default(),
            "x",
        )
        .unwrap();
        assert_eq!(r.scalar, 1.0);
        let r = mcqa_accuracy(
            &model(),
            &t,
            &[item(&["same", "same"], 1, "a")],
            &McqaTemplate::default(),
            "x",
        )
        .unwrap();
        assert_eq!(r.scalar, 0.0);
    }

    #[test]
    fn category_breakdown_weights_to_overall() {
        let t = TokenizerModel::byte_level();
        let items = vec![
            item(&["x", "y"], 0, "lit"),
            item(&["x", "y"], 1, "lit"),
            item(&["same", "same"], 0, "common"),
            item(&["ab", "cd", "ef"], 2, "math"),
        ];
        let r = mcqa_accuracy(&model(), &t, &items, &McqaTemplate::default(), "x").unwrap();
        let weighted = (r.breakdown["lit"] * 2.0 + r.breakdown["common"] + r.breakdown["math"]) / 4.0;
        assert!((weighted - r.scalar).abs() < 1e-12);
        assert_eq!(r.recompute_scalar().unwrap(), r.scalar);
    }

    #[test]
    fn empty_candidate_is_recorded_and_excluded() {
        let t = TokenizerModel::byte_level();
        let items = vec![item(&["same", "same"], 0, "a"), item(&["", "y"], 0, "a")];
        let r = mcqa_accuracy(&model(), &t, &items, &McqaTemplate::default(), "x").unwrap();
        assert_eq!(r.scalar, 1.0);
        assert_eq!(r.breakdown["_item_errors"], 1.0);
    }
}
