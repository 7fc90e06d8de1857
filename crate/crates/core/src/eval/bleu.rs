use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{config_hash, EvalError, EvalReport, ItemRecord};
use crate::model::ModelState;
use crate::tokenizer::TokenizerModel;

/// Sufficient statistics for corpus BLEU: clipped n-gram matches and
/// hypothesis n-gram totals for n = 1..4, plus lengths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; 4],
    pub totals: [u64; 4],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn add(&mut self, o: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU in [0, 100]. Zero match counts for n ≥ 2 are smoothed to
    /// (0 + 1) / (total + 1); a zero unigram count gives 0.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..4 {
            let (m, t) = (self.matches[n] as f64, self.totals[n] as f64);
            let p = if n > 0 && self.matches[n] == 0 {
                1.0 / (t + 1.0)
            } else {
                m / t
            };
            log_p += p.ln() / 4.0;
        }
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0);
        100.0 * (log_p + bp).exp()
    }
}

fn ngrams<'a, 'b>(toks: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], u64> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

pub fn bleu_stats(hyp: &str, reference: &str) -> BleuStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut s = BleuStats {
        hyp_len: h.len() as u64,
        ref_len: r.len() as u64,
        ..BleuStats::default()
    };
    for n in 1..=4 {
        let hc = ngrams(&h, n);
        let rc = ngrams(&r, n);
        s.totals[n - 1] = h.len().saturating_sub(n - 1) as u64;
        s.matches[n - 1] = hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
    }
    s
}

fn corpus_stats(hyps: &[String], refs: &[String]) -> Result<Vec<BleuStats>, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::PairMismatch(hyps.len(), refs.len()));
    }
    if hyps.is_empty() {
        return Err(EvalError::InvalidInput("no sentence pairs".into()));
    }
    Ok(hyps.iter().zip(refs).map(|(h, r)| bleu_stats(h, r)).collect())
}

/// Corpus-level BLEU with whitespace tokenization.
pub fn bleu(hyps: &[String], refs: &[String]) -> Result<f64, EvalError> {
    let mut total = BleuStats::default();
    for s in corpus_stats(hyps, refs)? {
        total.add(&s);
    }
    Ok(total.score())
}

pub fn bleu_report(hyps: &[String], refs: &[String], dataset: &str, config: &[u8]) -> Result<EvalReport, EvalError> {
    let stats = corpus_stats(hyps, refs)?;
    let mut total = BleuStats::default();
    for s in &stats {
        total.add(s);
    }
    let mut breakdown = BTreeMap::new();
    for n in 0..4 {
        breakdown.insert(
            format!("precision_{}", n + 1),
            total.matches[n] as f64 / total.totals[n].max(1) as f64,
        );
    }
    breakdown.insert("hyp_len".into(), total.hyp_len as f64);
    breakdown.insert("ref_len".into(), total.ref_len as f64);
    let per_item = stats
        .into_iter()
        .zip(hyps)
        .enumerate()
        .map(|(index, (stats, h))| ItemRecord::Bleu {
            index,
            hypothesis: h.clone(),
            stats,
        })
        .collect();
    let mut joined = Vec::new();
    for (h, r) in hyps.iter().zip(refs) {
        joined.extend_from_slice(h.as_bytes());
        joined.push(0);
        joined.extend_from_slice(r.as_bytes());
        joined.push(0);
    }
    Ok(EvalReport {
        metric: "bleu".into(),
        dataset: dataset.into(),
        scalar: total.score(),
        breakdown,
        per_item,
        config_hash: config_hash(&[b"bleu", config, &joined]),
        comet: None,
    })
}

/// k-shot translation prompt: one `source => target` line per shot, then the
/// query source followed by `=>`.
pub fn render_translation_prompt(instruction: &str, shots: &[(String, String)], src: &str) -> String {
    let mut p = format!("{instruction}\n");
    for (s, t) in shots {
        p.push_str(&format!("{s} => {t}\n"));
    }
    p.push_str(&format!("{src} =>"));
    p
}

/// Greedy translation; the output is cut at the first newline.
pub fn translate(m: &ModelState, t: &TokenizerModel, prompt: &str, max_new: usize) -> Result<String, EvalError> {
    let mut ids = vec![t.bos_id()];
    ids.extend(t.encode(prompt));
    let ctx = m.config().context_len;
    if ids.len() >= ctx {
        ids.drain(..ids.len() + 1 - ctx);
    }
    let out = m.generate_greedy(&ids, max_new, Some(t.eos_id()))?;
    let text = t.decode(&out).map_err(|e| EvalError::InvalidInput(e.to_string()))?;
    Ok(text.lines().next().unwrap_or("").trim().to_string())
}
