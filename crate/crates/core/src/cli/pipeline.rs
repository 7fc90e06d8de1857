//! `pipeline`: base and addon tokenizers, vocabulary merge, model init and
//! expansion, LoRA, the curriculum, then every evaluation. Artifacts land in
//! one output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use super::{envelope, load_evalsets, parse_targets, write_json, ModelSpec};
use crate::checkpoint;
use crate::data::load_corpus;
use crate::eval::{
    bleu_report, crosslingual_report, load_mcqa, load_parallel, load_sts, mcqa_accuracy, render_translation_prompt,
    sts_eval, translate, McqaTemplate,
};
use crate::model::{LoraConfig, ModelState};
use crate::sustainability::{carbon_report, CarbonInputs, CarbonReport};
use crate::tokenizer::{fertility, merge_vocabularies, train_bpe, BpeTrainStats, FertilityStats, MergeReport};
use crate::training::{run_curriculum, CurriculumPlan, StepCheckpoint, StepCounters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSection {
    pub base_corpus: PathBuf,
    pub base_merges: usize,
    pub addon_corpus: PathBuf,
    pub addon_merges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    /// Comma-separated weight ids, or "all"
    pub targets: String,
}

impl Default for LoraSection {
    fn default() -> Self {
        let d = LoraConfig::default();
        Self {
            rank: d.rank,
            alpha: d.alpha,
            dropout_p: d.dropout_p,
            targets: "all".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default)]
    pub mcqa: Option<PathBuf>,
    #[serde(default)]
    pub sts: Option<PathBuf>,
    #[serde(default)]
    pub parallel: Option<PathBuf>,
    #[serde(default)]
    pub bleu_shots: usize,
    #[serde(default = "default_max_new")]
    pub bleu_max_new: usize,
}

fn default_max_new() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub lora: LoraSection,
    pub curriculum: CurriculumPlan,
    pub eval: EvalSection,
    /// Held-out text for the fertility comparison
    pub fertility_corpus: PathBuf,
    #[serde(default)]
    pub carbon: Option<CarbonInputs>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.base_dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.curriculum.base_dir = cfg.base_dir.clone();
        if cfg.curriculum.tokenizer.is_some() {
            bail!("the pipeline trains its own tokenizer; drop curriculum.tokenizer");
        }
        cfg.curriculum.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.curriculum.training.seed = seed;
        self
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSummary {
    pub base: BpeTrainStats,
    pub addon: BpeTrainStats,
    pub merge: MergeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FertilitySummary {
    pub byte_level: FertilityStats,
    pub base: FertilityStats,
    pub merged: FertilityStats,
    /// 1 - merged / byte-level tokens per word
    pub reduction_vs_bytes: f64,
    pub reduction_vs_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub tokenizer: TokenizerSummary,
    pub fertility: FertilitySummary,
    pub trainable_scalars: usize,
    pub initial_perplexity: BTreeMap<String, f64>,
    pub grid: Vec<StepCheckpoint>,
    pub counters: Vec<StepCounters>,
    pub evals: BTreeMap<String, f64>,
    /// sha256 of each file written, by file name
    pub artifacts: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub carbon: Option<CarbonReport>,
}

pub fn summary_line(s: &PipelineSummary) -> String {
    let evals: Vec<String> = s.evals.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    format!(
        "vocab {} (fertility -{:.1}% vs bytes), {} steps, {}",
        s.tokenizer.merge.combined_size,
        100.0 * s.fertility.reduction_vs_bytes,
        s.grid.len(),
        evals.join(" ")
    )
}

struct Artifacts<'a> {
    dir: &'a Path,
    cfg: &'a PipelineConfig,
    seed: u64,
    digests: BTreeMap<String, String>,
}

impl Artifacts<'_> {
    fn record(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        let bytes = fs::read(&p).with_context(|| format!("reading back {}", p.display()))?;
        self.digests.insert(name.into(), checkpoint::sha256_hex(&bytes));
        Ok(p)
    }

    /// Writes `v` wrapped in the run envelope.
    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let command = format!("pipeline:{}", name.trim_end_matches(".json"));
        write_json(&self.dir.join(name), &envelope(&command, Some(self.seed), self.cfg, v))?;
        self.record(name).map(|_| ())
    }
}

/// Runs every stage with `seed`, which also replaces the curriculum's
/// training seed.
pub fn run_pipeline(cfg: &PipelineConfig, seed: u64, out: &Path) -> Result<PipelineSummary> {
    let cfg = &cfg.clone().with_seed(seed);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut art = Artifacts {
        dir: out,
        cfg,
        seed,
        digests: BTreeMap::new(),
    };

    let tc = &cfg.tokenizer;
    let (base_tok, base_stats) = train_bpe(&load_corpus(cfg.resolve(&tc.base_corpus))?, tc.base_merges)?;
    let (addon_tok, addon_stats) = train_bpe(&load_corpus(cfg.resolve(&tc.addon_corpus))?, tc.addon_merges)?;
    let (tok, merge) = merge_vocabularies(&base_tok, &addon_tok)?;
    for (name, t) in [
        ("tokenizer_base.json", &base_tok),
        ("tokenizer_addon.json", &addon_tok),
        ("tokenizer.json", &tok),
    ] {
        t.save(out.join(name))?;
        art.record(name)?;
    }
    log::info!("merged vocabulary: {} tokens", tok.vocab_size());

    let held_out = load_corpus(cfg.resolve(&cfg.fertility_corpus))?;
    let bytes_f = fertility(&crate::tokenizer::TokenizerModel::byte_level(), &held_out)?;
    let base_f = fertility(&base_tok, &held_out)?;
    let merged_f = fertility(&tok, &held_out)?;
    let fert = FertilitySummary {
        reduction_vs_bytes: 1.0 - merged_f.tokens_per_word / bytes_f.tokens_per_word,
        reduction_vs_base: 1.0 - merged_f.tokens_per_word / base_f.tokens_per_word,
        byte_level: bytes_f,
        base: base_f,
        merged: merged_f,
    };

    let mut m = ModelState::init(cfg.model.config(base_tok.vocab_size(), seed))?;
    m.expand_embeddings(tok.vocab_size(), seed)?;
    let targets = parse_targets(Some(&cfg.lora.targets), cfg.model.n_layers)?;
    m.attach_lora(
        &LoraConfig {
            rank: cfg.lora.rank,
            alpha: cfg.lora.alpha,
            dropout_p: cfg.lora.dropout_p,
            seed,
        },
        &targets,
    )?;
    checkpoint::save(&m, out.join("model_init.lfg"))?;
    art.record("model_init.lfg")?;
    let trainable_scalars = m.trainable_scalar_count();

    let plan = &cfg.curriculum;
    let evalsets = load_evalsets(plan)?;
    let (m, log) = run_curriculum(plan, m, &tok, &evalsets)?;
    checkpoint::save(&m, out.join("model.lfg"))?;
    art.record("model.lfg")?;
    art.json("train_log.json", &log)?;

    let mut evals = BTreeMap::new();
    let e = &cfg.eval;
    if let Some(p) = &e.mcqa {
        let p = cfg.resolve(p);
        let r = mcqa_accuracy(
            &m,
            &tok,
            &load_mcqa(&p)?,
            &McqaTemplate::default(),
            &p.display().to_string(),
        )?;
        evals.insert("mcqa_accuracy".to_string(), r.scalar);
        art.json("eval_mcqa.json", &r)?;
    }
    if let Some(p) = &e.sts {
        let p = cfg.resolve(p);
        let r = sts_eval(&m, &tok, &load_sts(&p)?, &p.display().to_string())?;
        evals.insert("sts_spearman".to_string(), r.scalar);
        art.json("eval_sts.json", &r)?;
    }
    if let Some(p) = &e.parallel {
        let p = cfg.resolve(p);
        let pairs = load_parallel(&p)?;
        let r = crosslingual_report(&m, &tok, &pairs, &p.display().to_string())?;
        evals.insert("crosslingual_cosine".to_string(), r.scalar);
        art.json("eval_xsim.json", &r)?;

        if e.bleu_shots >= pairs.len() {
            bail!("bleu_shots = {} leaves no pairs to score", e.bleu_shots);
        }
        let (shot_pairs, scored) = pairs.split_at(e.bleu_shots);
        let shots: Vec<(String, String)> = shot_pairs.iter().map(|p| (p.src.clone(), p.tgt.clone())).collect();
        let hyps = scored
            .iter()
            .map(|q| {
                translate(
                    &m,
                    &tok,
                    &render_translation_prompt("Translate:", &shots, &q.src),
                    e.bleu_max_new,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<String> = scored.iter().map(|q| q.tgt.clone()).collect();
        let r = bleu_report(&hyps, &refs, &p.display().to_string(), &serde_json::to_vec(e)?)?;
        evals.insert("bleu".to_string(), r.scalar);
        art.json("eval_bleu.json", &r)?;
    }

    let carbon = cfg.carbon.as_ref().map(carbon_report).transpose()?;

    Ok(PipelineSummary {
        tokenizer: TokenizerSummary {
            base: base_stats,
            addon: addon_stats,
            merge,
        },
        fertility: fert,
        trainable_scalars,
        initial_perplexity: log.initial,
        grid: log.grid,
        counters: log.counters,
        evals,
        artifacts: art.digests,
        carbon,
    })
}
