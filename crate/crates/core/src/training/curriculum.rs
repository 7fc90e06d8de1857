use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{Batch, BatchRow};
use super::optim::{train_step, AdamConfig, OptimizerState};
use super::sft::{format_sft_example, ChatTemplate};
use super::TrainError;
use crate::data::{load_corpus, load_instructions, pack_documents, split_documents, DataError, InstructionExample};
use crate::eval::perplexity;
use crate::model::{derive_seed, ModelState};
use crate::tokenizer::{TokenId, TokenizerModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSet {
    pub path: PathBuf,
    /// Number of examples taken from the head of the file.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub plaintext_corpus: PathBuf,
    #[serde(default)]
    pub instruction_sets: Vec<InstructionSet>,
    /// Cap on tokens processed per phase, summed over epochs.
    pub token_budget: u64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub template: ChatTemplate,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            seed: 0,
            template: ChatTemplate::default(),
        }
    }
}

/// Relative paths resolve against `base_dir`, which [`CurriculumPlan::load`]
/// sets to the plan file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<PathBuf>,
    pub steps: Vec<CurriculumStep>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub evalsets: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CurriculumPlan {
    pub fn from_json_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let mut plan: CurriculumPlan =
            serde_json::from_str(text).map_err(|e| TrainError::InvalidPlan(e.to_string()))?;
        plan.base_dir = base_dir.into();
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidPlan(m));
        if self.steps.is_empty() {
            return bad("plan has no steps".into());
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.token_budget == 0 || s.epochs == 0 {
                return bad(format!("step {}: token_budget and epochs must be > 0", i + 1));
            }
            if s.instruction_sets.iter().any(|set| set.count == 0) {
                return bad(format!("step {}: instruction set count must be > 0", i + 1));
            }
        }
        if self.training.batch_size == 0 {
            return bad("batch_size must be > 0".into());
        }
        Ok(())
    }

    /// Every referenced path, in plan order.
    pub fn dataset_paths(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for s in &self.steps {
            out.push(self.resolve(&s.plaintext_corpus));
            out.extend(s.instruction_sets.iter().map(|set| self.resolve(&set.path)));
        }
        out.extend(self.evalsets.values().map(|p| self.resolve(p)));
        out.extend(self.tokenizer.iter().map(|p| self.resolve(p)));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FineTune,
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub phase: Phase,
    pub update: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// One row of the perplexity grid: per language, after the plain-text phase
/// and (when the step has instructions) after SFT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCheckpoint {
    pub step: usize,
    pub name: String,
    pub after_ft: BTreeMap<String, f64>,
    pub after_sft: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounters {
    pub step: usize,
    /// Distinct corpus tokens available to the step (one pass).
    pub unique_corpus_tokens: u64,
    /// Tokens processed in the plain-text phase across epochs.
    pub ft_tokens_seen: u64,
    pub sft_examples: u64,
    pub sft_tokens_seen: u64,
    pub truncated_examples: u64,
    pub updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial: BTreeMap<String, f64>,
    pub grid: Vec<StepCheckpoint>,
    pub loss_curve: Vec<LossPoint>,
    pub counters: Vec<StepCounters>,
    pub tokens_seen: u64,
    /// Not serialized, so logs of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// Populated grid cells per language.
    pub fn checkpoints_per_language(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for row in &self.grid {
            for lang in row.after_ft.keys() {
                *out.entry(lang.clone()).or_default() += 1;
            }
            for lang in row.after_sft.iter().flat_map(|m| m.keys()) {
                *out.entry(lang.clone()).or_default() += 1;
            }
        }
        out
    }
}

struct StepData {
    blocks: Vec<Vec<TokenId>>,
    unique_tokens: u64,
    sft_rows: Vec<BatchRow>,
    truncated: u64,
}

fn prepare(plan: &CurriculumPlan, t: &TokenizerModel, context_len: usize) -> Result<Vec<StepData>, TrainError> {
    let template = &plan.training.template;
    plan.steps
        .iter()
        .map(|step| {
            let path = plan.resolve(&step.plaintext_corpus);
            let text = load_corpus(&path)?;
            let docs: Vec<Vec<TokenId>> = split_documents(&text).iter().map(|d| t.encode(d)).collect();
            let packed = pack_documents(&docs, context_len, t.eos_id());
            if packed.blocks.is_empty() {
                return Err(TrainError::InvalidPlan(format!(
                    "{} is shorter than one {context_len}-token block",
                    path.display()
                )));
            }
            let mut sft_rows = Vec::new();
            let mut truncated = 0;
            for set in &step.instruction_sets {
                let examples = load_instructions(plan.resolve(&set.path))?;
                for ex in examples.iter().take(set.count) {
                    let f = format_sft_example(ex, t, template, context_len)?;
                    truncated += u64::from(f.truncated);
                    sft_rows.push(f.row);
                }
            }
            Ok(StepData {
                blocks: packed.blocks,
                unique_tokens: packed.source_token_count as u64,
                sft_rows,
                truncated,
            })
        })
        .collect()
}

fn evaluate(
    m: &ModelState,
    t: &TokenizerModel,
    evalsets: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, f64>, TrainError> {
    evalsets
        .iter()
        .map(|(lang, corpus)| Ok((lang.clone(), perplexity(m, t, corpus).map_err(Box::new)?)))
        .collect()
}

/// Runs one phase: shuffled mini-batches for up to `epochs` passes, stopping
/// once `budget` tokens have been processed. Returns tokens processed.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    m: &mut ModelState,
    opt: &mut OptimizerState,
    rows: &[BatchRow],
    pad: TokenId,
    cfg: &TrainConfig,
    epochs: usize,
    budget: u64,
    step: usize,
    phase: Phase,
    log: &mut TrainLog,
) -> Result<u64, TrainError> {
    let mut seen = 0u64;
    for epoch in 0..epochs {
        let salt = ((step as u64) << 32) | ((phase as u64) << 16) | epoch as u64;
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, salt)));
        for chunk in order.chunks(cfg.batch_size) {
            if seen >= budget {
                return Ok(seen);
            }
            let picked: Vec<BatchRow> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let batch = Batch::from_rows(&picked, pad);
            let metrics = train_step(m, opt, &batch)?;
            seen += picked.iter().map(|r| r.len() as u64).sum::<u64>();
            log.loss_curve.push(LossPoint {
                step,
                phase,
                update: opt.step,
                loss: metrics.loss,
                grad_norm: metrics.grad_norm,
            });
        }
    }
    Ok(seen)
}

/// Executes every step of `plan`: a plain-text phase, then an SFT phase when
/// the step lists instruction sets. Perplexity on each evalset is recorded
/// before training and after every phase. All datasets are loaded before the
/// first update.
pub fn run_curriculum(
    plan: &CurriculumPlan,
    mut m: ModelState,
    t: &TokenizerModel,
    evalsets: &BTreeMap<String, String>,
) -> Result<(ModelState, TrainLog), TrainError> {
    let started = Instant::now();
    plan.validate()?;
    for p in plan.dataset_paths() {
        if !p.is_file() {
            return Err(TrainError::DatasetNotFound(p));
        }
    }
    if t.vocab_size() > m.vocab_size() {
        return Err(TrainError::ShapeMismatch(format!(
            "tokenizer has {} tokens but the model only {}",
            t.vocab_size(),
            m.vocab_size()
        )));
    }
    let cfg = &plan.training;
    let data = prepare(plan, t, m.config().context_len)?;

    let mut log = TrainLog {
        initial: evaluate(&m, t, evalsets)?,
        grid: Vec::new(),
        loss_curve: Vec::new(),
        counters: Vec::new(),
        tokens_seen: 0,
        wall_clock_secs: 0.0,
    };
    let mut opt = OptimizerState::new(&m, cfg.adam.clone(), cfg.seed);
    let pad = t.pad_id();
    for (i, (step, d)) in plan.steps.iter().zip(&data).enumerate() {
        let n = i + 1;
        let name = step.name.clone().unwrap_or_else(|| format!("step {n}"));
        let updates_before = opt.step;
        let blocks: Vec<BatchRow> = d.blocks.iter().map(|b| BatchRow::from_block(b, pad)).collect();
        let ft = run_phase(
            &mut m,
            &mut opt,
            &blocks,
            pad,
            cfg,
            step.epochs,
            step.token_budget,
            n,
            Phase::FineTune,
            &mut log,
        )?;
        let after_ft = evaluate(&m, t, evalsets)?;
        log::info!("{name}: plain-text phase done, {ft} tokens, ppl {after_ft:?}");

        let (sft, after_sft) = if d.sft_rows.is_empty() {
            (0, None)
        } else {
            let seen = run_phase(
                &mut m,
                &mut opt,
                &d.sft_rows,
                pad,
                cfg,
                step.epochs,
                step.token_budget,
                n,
                Phase::Sft,
                &mut log,
            )?;
            let ppl = evaluate(&m, t, evalsets)?;
            log::info!("{name}: SFT phase done, {seen} tokens, ppl {ppl:?}");
            (seen, Some(ppl))
        };
        log.grid.push(StepCheckpoint {
            step: n,
            name,
            after_ft,
            after_sft,
        });
        log.counters.push(StepCounters {
            step: n,
            unique_corpus_tokens: d.unique_tokens,
            ft_tokens_seen: ft,
            sft_examples: d.sft_rows.len() as u64,
            sft_tokens_seen: sft,
            truncated_examples: d.truncated,
            updates: opt.step - updates_before,
        });
        log.tokens_seen += ft + sft;
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((m, log))
}

/// Instruction tuning on its own, outside a curriculum.
pub fn run_sft(
    mut m: ModelState,
    t: &TokenizerModel,
    examples: &[InstructionExample],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(ModelState, TrainLog), TrainError> {
    let started = Instant::now();
    let ctx = m.config().context_len;
    let mut rows = Vec::with_capacity(examples.len());
    let mut truncated = 0;
    for ex in examples {
        let f = format_sft_example(ex, t, &cfg.template, ctx)?;
        truncated += u64::from(f.truncated);
        rows.push(f.row);
    }
    if rows.is_empty() {
        return Err(TrainError::InvalidPlan("no instruction examples".into()));
    }
    let mut log = TrainLog {
        initial: BTreeMap::new(),
        grid: Vec::new(),
        loss_curve: Vec::new(),
        counters: Vec::new(),
        tokens_seen: 0,
        wall_clock_secs: 0.0,
    };
    let mut opt = OptimizerState::new(&m, cfg.adam.clone(), cfg.seed);
    let seen = run_phase(
        &mut m,
        &mut opt,
        &rows,
        t.pad_id(),
        cfg,
        epochs,
        u64::MAX,
        1,
        Phase::Sft,
        &mut log,
    )?;
    log.counters.push(StepCounters {
        step: 1,
        sft_examples: rows.len() as u64,
        sft_tokens_seen: seen,
        truncated_examples: truncated,
        updates: opt.step,
        ..StepCounters::default()
    });
    log.tokens_seen = seen;
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((m, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraConfig, TransformerConfig, WeightId};
    use crate::tokenizer::train_bpe;

    const TEXT: &str = "the quick brown fox jumps over the lazy dog. \
        a stitch in time saves nine. all that glitters is not gold.\n\n\
        the early bird catches the worm. actions speak louder than words.";

    fn setup(dir: &Path) -> (ModelState, TokenizerModel) {
        fs::write(dir.join("corpus.txt"), TEXT.repeat(3)).unwrap();
        fs::write(
            dir.join("inst.jsonl"),
            "{\"prompt\":\"say hi\",\"response\":\"hi\"}\n{\"prompt\":\"fox?\",\"response\":\"quick brown\"}\n",
        )
        .unwrap();
        let (t, _) = train_bpe(TEXT, 20).unwrap();
        let mut cfg = TransformerConfig::toy(t.vocab_size());
        cfg.d_model = 16;
        cfg.d_ff = 32;
        cfg.context_len = 32;
        let mut m = ModelState::init(cfg).unwrap();
        m.attach_lora(&LoraConfig::default(), &WeightId::all(2)).unwrap();
        (m, t)
    }

    fn plan(dir: &Path, with_sft: &[bool]) -> CurriculumPlan {
        let steps: Vec<serde_json::Value> = with_sft
            .iter()
            .map(|&s| {
                let sets = if s {
                    serde_json::json!([{"path": "inst.jsonl", "count": 2}])
                } else {
                    serde_json::json!([])
                };
                serde_json::json!({"plaintext_corpus": "corpus.txt", "instruction_sets": sets,
                                   "token_budget": 200, "epochs": 1})
            })
            .collect();
        let doc = serde_json::json!({"steps": steps, "training": {"learning_rate": 0.01, "batch_size": 2}});
        CurriculumPlan::from_json_str(&doc.to_string(), dir).unwrap()
    }

    fn evalsets() -> BTreeMap<String, String> {
        BTreeMap::from([("en".to_string(), TEXT.to_string())])
    }

    #[test]
    fn step_one_shape() {
        let dir = tempfile::tempdir().unwrap();
        let (m, t) = setup(dir.path());
        let (_, log) = run_curriculum(&plan(dir.path(), &[false]), m, &t, &evalsets()).unwrap();
        assert_eq!(log.grid.len(), 1);
        assert!(log.grid[0].after_sft.is_none());
        assert_eq!(log.checkpoints_per_language()["en"], 1);
    }

    #[test]
    fn three_steps_give_five_cells_and_repeat_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (m, t) = setup(dir.path());
        let p = plan(dir.path(), &[false, true, true]);
        let (m1, log1) = run_curriculum(&p, m.clone(), &t, &evalsets()).unwrap();
        let (m2, log2) = run_curriculum(&p, m, &t, &evalsets()).unwrap();
        assert_eq!(log1.checkpoints_per_language()["en"], 5);
        assert_eq!(
            serde_json::to_string(&log1).unwrap(),
            serde_json::to_string(&log2).unwrap()
        );
        assert_eq!(m1, m2);
        assert!(log1.counters.iter().all(|c| c.ft_tokens_seen >= 200));
    }

    #[test]
    fn missing_dataset_fails_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let (m, t) = setup(dir.path());
        let mut p = plan(dir.path(), &[false, true]);
        p.steps[1].instruction_sets[0].path = "nope.jsonl".into();
        let err = run_curriculum(&p, m, &t, &evalsets()).unwrap_err();
        assert!(matches!(err, TrainError::DatasetNotFound(ref path) if path.ends_with("nope.jsonl")));
    }

    #[test]
    fn invalid_plans_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(CurriculumPlan::from_json_str("{\"steps\": []}", dir.path()).is_err());
        let zero = r#"{"steps":[{"plaintext_corpus":"a","token_budget":0,"epochs":1}]}"#;
        assert!(matches!(
            CurriculumPlan::from_json_str(zero, dir.path()),
            Err(TrainError::InvalidPlan(_))
        ));
    }
}
