//! Command-line front end. Every subcommand writes its artifacts to `--out`
//! and prints a JSON envelope (with `--json`) or a one-line summary.
//!
//! Exit status: 0 success, 1 runtime or validation failure (error JSON on
//! stderr), 2 usage error.

mod pipeline;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{self, sha256_hex};
use crate::data::{load_corpus, load_instructions};
use crate::eval::{
    bleu_report, crosslingual_report, load_mcqa, load_parallel, load_sts, mcqa_accuracy, perplexity_report,
    render_translation_prompt, sts_eval, translate, McqaTemplate, ParallelPair,
};
use crate::model::{LoraConfig, ModelState, TransformerConfig, WeightId};
use crate::sustainability::{carbon_report, CarbonInputs};
use crate::tokenizer::{fertility, merge_vocabularies, train_bpe, TokenizerModel};
use crate::training::{run_curriculum, run_sft, CurriculumPlan, TrainConfig};

pub use pipeline::{run_pipeline, PipelineConfig, PipelineSummary};

#[derive(Debug, Parser)]
#[command(
    name = "linguaforge",
    version,
    about = "Vocabulary expansion, LoRA curriculum training and evaluation for a tiny causal LM"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Seed for every random choice in the run
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the subcommand
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the full JSON report on stdout
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn byte-level BPE merges from a corpus
    TrainTokenizer(TrainTokenizerArgs),
    /// Append an addon vocabulary to a base vocabulary
    MergeVocab(MergeVocabArgs),
    /// Tokens per word / per character on a corpus
    Fertility(FertilityArgs),
    /// Create a randomly initialised model checkpoint
    InitModel(InitModelArgs),
    /// Grow the embedding matrices to a larger vocabulary
    Expand(ExpandArgs),
    /// Wrap base matrices with LoRA adapters
    AttachLora(AttachLoraArgs),
    /// Run a curriculum plan
    Pretrain(PretrainArgs),
    /// Instruction-tune on a JSONL file
    Sft(SftArgs),
    /// Perplexity on a text corpus
    EvalPpl(EvalPplArgs),
    /// Multiple-choice QA accuracy
    EvalMcqa(EvalDataArgs),
    /// STS Spearman correlation of sentence-embedding cosines
    EvalSts(EvalDataArgs),
    /// Mean cross-lingual cosine over parallel pairs
    EvalXsim(EvalDataArgs),
    /// BLEU of k-shot greedy translations (or of a hypotheses file)
    EvalBleu(EvalBleuArgs),
    /// Training energy and emissions
    Carbon(CarbonArgs),
    /// End-to-end toy run: tokenizers, model, curriculum, evaluation
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainTokenizerArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub merges: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct MergeVocabArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub addon: PathBuf,
    /// Also write the merge report here
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FertilityArgs {
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Second tokenizer to compare against
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct InitModelArgs {
    /// JSON model config; missing fields take the toy defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Take the vocabulary size from this tokenizer
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExpandArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttachLoraArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 16.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    pub dropout: f64,
    /// Comma-separated targets such as `layers.0.wq`; default is every matrix
    #[arg(long)]
    pub targets: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
    /// Overrides the plan's tokenizer
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SftArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalPplArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalDataArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalBleuArgs {
    /// Parallel JSONL with `src` and `tgt`
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// The first K pairs become in-context examples and are not scored
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    /// Score these hypotheses (one per line) instead of generating
    #[arg(long)]
    pub hyps: Option<PathBuf>,
    #[arg(long, default_value_t = 48)]
    pub max_new: usize,
    #[arg(long, default_value = "Translate:")]
    pub instruction: String,
}

#[derive(Debug, Args, Serialize)]
pub struct CarbonArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub gpu_hours: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub gpus: Option<u32>,
    #[arg(long, allow_negative_numbers = true)]
    pub hours_per_gpu: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub watts: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub pue: f64,
    /// Grid carbon intensity, g CO2eq per kWh
    #[arg(long, allow_negative_numbers = true)]
    pub intensity: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
}

pub(crate) struct Ctx {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub json: bool,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| anyhow!("--out is required for this command"))
    }
}

/// The resolved run configuration with its digest, embedded in every report.
pub(crate) fn envelope<C: Serialize, R: Serialize>(command: &str, seed: Option<u64>, config: &C, result: &R) -> Value {
    let config = serde_json::to_value(config).expect("serializable");
    let digest = sha256_hex(
        serde_json::to_string(&json!([command, seed, config]))
            .expect("json")
            .as_bytes(),
    );
    json!({
        "command": command,
        "seed": seed,
        "config": config,
        "config_digest": digest,
        "result": result,
    })
}

pub(crate) fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_tokenizer(p: &Path) -> Result<TokenizerModel> {
    TokenizerModel::load(p).with_context(|| format!("loading tokenizer {}", p.display()))
}

fn load_model(p: &Path) -> Result<ModelState> {
    checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn save_model(m: &ModelState, p: &Path) -> Result<()> {
    prepare_parent(p)?;
    checkpoint::save(m, p).with_context(|| format!("writing {}", p.display()))
}

/// Prints the envelope (or summary) and, for report-only commands, writes it
/// to `--out` when given.
fn finish(ctx: &Ctx, env: &Value, summary: &str, report_to_out: bool) -> Result<()> {
    if report_to_out {
        if let Some(out) = &ctx.out {
            write_json(out, env)?;
        }
    }
    if ctx.json {
        println!("{}", serde_json::to_string_pretty(env)?);
    } else {
        println!("{summary}");
    }
    Ok(())
}

pub(crate) fn parse_targets(spec: Option<&str>, n_layers: usize) -> Result<Vec<WeightId>> {
    match spec {
        None | Some("all") => Ok(WeightId::all(n_layers)),
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<WeightId>()
                    .map_err(|_| anyhow!("bad LoRA target {t:?}"))
            })
            .collect(),
    }
}

/// Model hyper-parameters other than vocabulary size and seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let t = TransformerConfig::toy(0);
        Self {
            d_model: t.d_model,
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            d_ff: t.d_ff,
            context_len: t.context_len,
            tie_embeddings: t.tie_embeddings,
        }
    }
}

impl ModelSpec {
    pub fn config(&self, vocab_size: usize, seed: u64) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            context_len: self.context_len,
            tie_embeddings: self.tie_embeddings,
            seed,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out,
        json: cli.json,
    };
    match cli.command {
        Command::TrainTokenizer(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let (t, stats) = train_bpe(&corpus, a.merges)?;
            let out = ctx.out()?;
            prepare_parent(out)?;
            t.save(out)?;
            let result = json!({"stats": stats, "vocab_size": t.vocab_size()});
            let env = envelope("train-tokenizer", ctx.seed, &a, &result);
            finish(
                &ctx,
                &env,
                &format!("{} merges learned, vocab {}", stats.learned_merges, t.vocab_size()),
                false,
            )
        }
        Command::MergeVocab(a) => {
            let (merged, report) = merge_vocabularies(&load_tokenizer(&a.base)?, &load_tokenizer(&a.addon)?)?;
            let out = ctx.out()?;
            prepare_parent(out)?;
            merged.save(out)?;
            let env = envelope("merge-vocab", ctx.seed, &a, &report);
            if let Some(p) = &a.report {
                write_json(p, &env)?;
            }
            let summary = format!(
                "{} + {} tokens, {} collisions -> {}",
                report.base_size, report.addon_size, report.collisions, report.combined_size
            );
            finish(&ctx, &env, &summary, false)
        }
        Command::Fertility(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let stats = fertility(&load_tokenizer(&a.tokenizer)?, &corpus)?;
            let mut result = json!({"tokenizer": stats});
            let mut summary = format!("{:.4} tokens/word", stats.tokens_per_word);
            if let Some(b) = &a.baseline {
                let base = fertility(&load_tokenizer(b)?, &corpus)?;
                let reduction = 1.0 - stats.tokens_per_word / base.tokens_per_word;
                summary.push_str(&format!(
                    " (baseline {:.4}, {:.1}% fewer)",
                    base.tokens_per_word,
                    100.0 * reduction
                ));
                result["baseline"] = json!(base);
                result["tokens_per_word_reduction"] = json!(reduction);
            }
            finish(&ctx, &envelope("fertility", ctx.seed, &a, &result), &summary, true)
        }
        Command::InitModel(a) => {
            let spec: ModelSpec = match &a.config {
                Some(p) => {
                    serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => ModelSpec::default(),
            };
            let vocab = match (&a.tokenizer, a.vocab_size) {
                (Some(t), _) => load_tokenizer(t)?.vocab_size(),
                (None, Some(v)) => v,
                (None, None) => TokenizerModel::byte_level().vocab_size(),
            };
            let m = ModelState::init(spec.config(vocab, ctx.seed()))?;
            save_model(&m, ctx.out()?)?;
            let result = json!({"config": m.config(), "fingerprint": checkpoint::fingerprint(&m)});
            finish(
                &ctx,
                &envelope("init-model", ctx.seed, &a, &result),
                &format!("initialised model with vocab {vocab}"),
                false,
            )
        }
        Command::Expand(a) => {
            let mut m = load_model(&a.model)?;
            let old = m.vocab_size();
            let new = match (&a.tokenizer, a.vocab_size) {
                (Some(t), _) => load_tokenizer(t)?.vocab_size(),
                (None, Some(v)) => v,
                (None, None) => bail!("expand needs --tokenizer or --vocab-size"),
            };
            m.expand_embeddings(new, ctx.seed())?;
            save_model(&m, ctx.out()?)?;
            let result =
                json!({"old_vocab_size": old, "new_vocab_size": new, "fingerprint": checkpoint::fingerprint(&m)});
            finish(
                &ctx,
                &envelope("expand", ctx.seed, &a, &result),
                &format!("vocab {old} -> {new}"),
                false,
            )
        }
        Command::AttachLora(a) => {
            let mut m = load_model(&a.model)?;
            let targets = parse_targets(a.targets.as_deref(), m.config().n_layers)?;
            let cfg = LoraConfig {
                rank: a.rank,
                alpha: a.alpha,
                dropout_p: a.dropout,
                seed: ctx.seed(),
            };
            m.attach_lora(&cfg, &targets)?;
            save_model(&m, ctx.out()?)?;
            let result = json!({
                "adapters": targets.iter().map(ToString::to_string).collect::<Vec<_>>(),
                "trainable_scalars": m.trainable_scalar_count(),
                "fingerprint": checkpoint::fingerprint(&m),
            });
            finish(
                &ctx,
                &envelope("attach-lora", ctx.seed, &a, &result),
                &format!("{} adapters attached", targets.len()),
                false,
            )
        }
        Command::Pretrain(a) => {
            let mut plan = CurriculumPlan::load(&a.plan)?;
            if let Some(s) = ctx.seed {
                plan.training.seed = s;
            }
            let tok_path = match (&a.tokenizer, &plan.tokenizer) {
                (Some(p), _) => p.clone(),
                (None, Some(p)) => plan.resolve(p),
                (None, None) => bail!("no tokenizer: pass --tokenizer or set \"tokenizer\" in the plan"),
            };
            let t = load_tokenizer(&tok_path)?;
            let evalsets = load_evalsets(&plan)?;
            let (m, log) = run_curriculum(&plan, load_model(&a.init)?, &t, &evalsets)?;
            let dir = ctx.out()?;
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            save_model(&m, &dir.join("model.lfg"))?;
            let env = envelope("pretrain", ctx.seed, &json!({"args": &a, "plan": &plan}), &log);
            write_json(&dir.join("train_log.json"), &env)?;
            let summary = format!(
                "{} updates, {} tokens; grid {:?}",
                log.loss_curve.len(),
                log.tokens_seen,
                log.grid.last().map(|g| &g.after_ft)
            );
            finish(&ctx, &env, &summary, false)
        }
        Command::Sft(a) => {
            let t = load_tokenizer(&a.tokenizer)?;
            let examples = load_instructions(&a.data)?;
            let mut cfg = TrainConfig {
                seed: ctx.seed(),
                ..TrainConfig::default()
            };
            if let Some(lr) = a.lr {
                cfg.adam.learning_rate = lr;
            }
            if let Some(b) = a.batch_size {
                cfg.batch_size = b;
            }
            let (m, log) = run_sft(load_model(&a.model)?, &t, &examples, &cfg, a.epochs)?;
            save_model(&m, ctx.out()?)?;
            let last = log.loss_curve.last().map_or(f64::NAN, |p| p.loss);
            finish(
                &ctx,
                &envelope("sft", ctx.seed, &json!({"args": &a, "training": &cfg}), &log),
                &format!("{} updates, final loss {last:.4}", log.loss_curve.len()),
                false,
            )
        }
        Command::EvalPpl(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let r = perplexity_report(
                &load_model(&a.model)?,
                &load_tokenizer(&a.tokenizer)?,
                &corpus,
                &a.corpus.display().to_string(),
            )?;
            finish(
                &ctx,
                &envelope("eval-ppl", ctx.seed, &a, &r),
                &format!("perplexity {:.4}", r.scalar),
                true,
            )
        }
        Command::EvalMcqa(a) => {
            let items = load_mcqa(&a.data)?;
            let r = mcqa_accuracy(
                &load_model(&a.model)?,
                &load_tokenizer(&a.tokenizer)?,
                &items,
                &McqaTemplate::default(),
                &a.data.display().to_string(),
            )?;
            finish(
                &ctx,
                &envelope("eval-mcqa", ctx.seed, &a, &r),
                &format!("accuracy {:.4}", r.scalar),
                true,
            )
        }
        Command::EvalSts(a) => {
            let pairs = load_sts(&a.data)?;
            let r = sts_eval(
                &load_model(&a.model)?,
                &load_tokenizer(&a.tokenizer)?,
                &pairs,
                &a.data.display().to_string(),
            )?;
            finish(
                &ctx,
                &envelope("eval-sts", ctx.seed, &a, &r),
                &format!("spearman {:.4}", r.scalar),
                true,
            )
        }
        Command::EvalXsim(a) => {
            let pairs = load_parallel(&a.data)?;
            let r = crosslingual_report(
                &load_model(&a.model)?,
                &load_tokenizer(&a.tokenizer)?,
                &pairs,
                &a.data.display().to_string(),
            )?;
            finish(
                &ctx,
                &envelope("eval-xsim", ctx.seed, &a, &r),
                &format!("mean cosine {:.4}", r.scalar),
                true,
            )
        }
        Command::EvalBleu(a) => {
            let pairs = load_parallel(&a.data)?;
            let r = eval_bleu(&a, &pairs)?;
            finish(
                &ctx,
                &envelope("eval-bleu", ctx.seed, &a, &r),
                &format!("BLEU {:.2}", r.scalar),
                true,
            )
        }
        Command::Carbon(a) => {
            let gpu_hours = match (a.gpu_hours, a.gpus, a.hours_per_gpu) {
                (Some(h), None, None) => h,
                (None, Some(g), Some(h)) => g as f64 * h,
                _ => bail!("give either --gpu-hours or both --gpus and --hours-per-gpu"),
            };
            let r = carbon_report(&CarbonInputs {
                gpu_hours,
                device_watts: a.watts,
                pue: a.pue,
                grid_intensity: a.intensity,
            })?;
            let summary = format!(
                "{:.2} kWh, {:.2} kg CO2eq",
                r.energy_kwh_rounded, r.emissions_kgco2eq_rounded
            );
            finish(&ctx, &envelope("carbon", ctx.seed, &a, &r), &summary, true)
        }
        Command::Pipeline(a) => {
            let cfg = PipelineConfig::load(&a.config)?.with_seed(ctx.seed());
            let summary = run_pipeline(&cfg, ctx.seed(), ctx.out()?)?;
            let env = envelope("pipeline", ctx.seed, &json!({"args": &a, "pipeline": &cfg}), &summary);
            write_json(&ctx.out()?.join("summary.json"), &env)?;
            finish(&ctx, &env, &pipeline::summary_line(&summary), false)
        }
    }
}

pub(crate) fn load_evalsets(plan: &CurriculumPlan) -> Result<BTreeMap<String, String>> {
    plan.evalsets
        .iter()
        .map(|(lang, p)| Ok((lang.clone(), load_corpus(plan.resolve(p))?)))
        .collect()
}

fn eval_bleu(a: &EvalBleuArgs, pairs: &[ParallelPair]) -> Result<crate::eval::EvalReport> {
    if a.shots >= pairs.len() {
        bail!("{} shots leave no pairs to score ({} in file)", a.shots, pairs.len());
    }
    let (shot_pairs, scored) = pairs.split_at(a.shots);
    let refs: Vec<String> = scored.iter().map(|p| p.tgt.clone()).collect();
    let hyps: Vec<String> = match &a.hyps {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::to_string)
            .collect(),
        None => {
            let (Some(mp), Some(tp)) = (&a.model, &a.tokenizer) else {
                bail!("eval-bleu needs --model and --tokenizer unless --hyps is given");
            };
            let m = load_model(mp)?;
            let t = load_tokenizer(tp)?;
            let shots: Vec<(String, String)> = shot_pairs.iter().map(|p| (p.src.clone(), p.tgt.clone())).collect();
            scored
                .iter()
                .map(|p| {
                    translate(
                        &m,
                        &t,
                        &render_translation_prompt(&a.instruction, &shots, &p.src),
                        a.max_new,
                    )
                })
                .collect::<Result<_, _>>()?
        }
    };
    let cfg = serde_json::to_vec(a)?;
    Ok(bleu_report(&hyps, &refs, &a.data.display().to_string(), &cfg)?)
}

/// Short error kind: the variant name of the innermost library error.
fn error_kind(e: &anyhow::Error) -> String {
    let debug = |s: String| {
        s.split(|c: char| !c.is_alphanumeric())
            .next()
            .unwrap_or("Error")
            .to_string()
    };
    for cause in e.chain() {
        if let Some(x) = cause.downcast_ref::<crate::training::TrainError>() {
            return debug(format!("{x:?}"));
        }
        if let Some(x) = cause.downcast_ref::<crate::eval::EvalError>() {
            return debug(format!("{x:?}"));
        }
        if let Some(x) = cause.downcast_ref::<crate::data::DataError>() {
            return debug(format!("{x:?}"));
        }
        if let Some(x) = cause.downcast_ref::<crate::model::ModelError>() {
            return debug(format!("{x:?}"));
        }
        if let Some(x) = cause.downcast_ref::<crate::tokenizer::TokenizerError>() {
            return debug(format!("{x:?}"));
        }
        if let Some(x) = cause.downcast_ref::<crate::sustainability::CarbonError>() {
            return debug(format!("{x:?}"));
        }
    }
    "Error".into()
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LINGUAFORGE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("LINGUAFORGE_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            let err = json!({"error": {"kind": error_kind(&e), "message": format!("{e:#}")}});
            eprintln!("{err}");
            1
        }
    }
}
