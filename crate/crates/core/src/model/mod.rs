//! A tiny pre-norm decoder-only transformer with trainable embeddings and
//! LoRA adapters over frozen base weights.
//!
//! Layout per block: RMSNorm, multi-head causal self-attention (Wq, Wk, Wv,
//! Wo), residual add, RMSNorm, SiLU feed-forward (W_up, W_down), residual add.
//! Positions are injected with a fixed sinusoidal table added to the input
//! embeddings, so the only learned state outside the blocks is the pair of
//! embedding matrices.

mod backward;
mod forward;
mod lora;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{cast1, cast2, Scalar};
use crate::tokenizer::TokenId;

pub use backward::Gradients;
pub use forward::{ForwardCache, Mode};
pub use lora::{LoraAdapter, LoraConfig};

/// Vocabulary floor: the byte alphabet plus bos, eos, pad and unk.
pub const MIN_VOCAB: usize = 256 + 4;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    ConfigError(String),
    #[error("cannot shrink vocabulary from {old} to {new}")]
    ShrinkNotAllowed { old: usize, new: usize },
    #[error("{0} already has an adapter")]
    AlreadyAdapted(WeightId),
    #[error("no adapters to merge")]
    NothingToMerge,
    #[error("sequence of {len} tokens exceeds context of {context_len}")]
    ContextOverflow { len: usize, context_len: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    InvalidTokenId { id: TokenId, vocab_size: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl TransformerConfig {
    /// Two layers, two heads, width 64, feed-forward 256, context 128.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            context_len: 128,
            tie_embeddings: false,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::ConfigError(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return err("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len < 2 {
            return err(format!("context_len {} < 2", self.context_len));
        }
        if self.vocab_size < MIN_VOCAB {
            return err(format!(
                "vocab_size {} below byte alphabet plus specials ({MIN_VOCAB})",
                self.vocab_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Wq,
    Wk,
    Wv,
    Wo,
    Up,
    Down,
}

impl WeightKind {
    pub const ALL: [WeightKind; 6] = [
        WeightKind::Wq,
        WeightKind::Wk,
        WeightKind::Wv,
        WeightKind::Wo,
        WeightKind::Up,
        WeightKind::Down,
    ];

    fn name(self) -> &'static str {
        match self {
            WeightKind::Wq => "wq",
            WeightKind::Wk => "wk",
            WeightKind::Wv => "wv",
            WeightKind::Wo => "wo",
            WeightKind::Up => "w_up",
            WeightKind::Down => "w_down",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// One adaptable base matrix: `layers.{layer}.{kind}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WeightId {
    pub layer: usize,
    pub kind: WeightKind,
}

impl WeightId {
    pub fn new(layer: usize, kind: WeightKind) -> Self {
        Self { layer, kind }
    }

    /// Every attention and feed-forward matrix of every layer.
    pub fn all(n_layers: usize) -> Vec<WeightId> {
        (0..n_layers)
            .flat_map(|l| WeightKind::ALL.into_iter().map(move |k| WeightId::new(l, k)))
            .collect()
    }
}

impl fmt::Display for WeightId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.kind.name())
    }
}

impl std::str::FromStr for WeightId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s
            .strip_prefix("layers.")
            .ok_or_else(|| format!("bad weight id {s:?}"))?;
        let (layer, kind) = rest.split_once('.').ok_or_else(|| format!("bad weight id {s:?}"))?;
        Ok(WeightId {
            layer: layer.parse().map_err(|_| format!("bad layer in {s:?}"))?,
            kind: WeightKind::from_name(kind).ok_or_else(|| format!("bad kind in {s:?}"))?,
        })
    }
}

/// Reference to one trainable matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    InputEmbeddings,
    OutputEmbeddings,
    LoraA(WeightId),
    LoraB(WeightId),
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::InputEmbeddings => f.write_str("input_embeddings"),
            ParamId::OutputEmbeddings => f.write_str("output_embeddings"),
            ParamId::LoraA(w) => write!(f, "{w}.lora_a"),
            ParamId::LoraB(w) => write!(f, "{w}.lora_b"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Scalar> {
    pub attn_norm: Array1<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub ffn_norm: Array1<T>,
    pub w_up: Array2<T>,
    pub w_down: Array2<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn weight(&self, kind: WeightKind) -> &Array2<T> {
        match kind {
            WeightKind::Wq => &self.wq,
            WeightKind::Wk => &self.wk,
            WeightKind::Wv => &self.wv,
            WeightKind::Wo => &self.wo,
            WeightKind::Up => &self.w_up,
            WeightKind::Down => &self.w_down,
        }
    }

    pub(crate) fn weight_mut(&mut self, kind: WeightKind) -> &mut Array2<T> {
        match kind {
            WeightKind::Wq => &mut self.wq,
            WeightKind::Wk => &mut self.wk,
            WeightKind::Wv => &mut self.wv,
            WeightKind::Wo => &mut self.wo,
            WeightKind::Up => &mut self.w_up,
            WeightKind::Down => &mut self.w_down,
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            attn_norm: cast1(&self.attn_norm),
            wq: cast2(&self.wq),
            wk: cast2(&self.wk),
            wv: cast2(&self.wv),
            wo: cast2(&self.wo),
            ffn_norm: cast1(&self.ffn_norm),
            w_up: cast2(&self.w_up),
            w_down: cast2(&self.w_down),
        }
    }
}

/// Model weights. Base matrices (`layers`, `final_norm`) are frozen: nothing in
/// this crate mutates them except [`ModelState::merge_lora`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Scalar = f32> {
    pub(crate) config: TransformerConfig,
    pub(crate) input_embeddings: Array2<T>,
    /// `None` when embeddings are tied.
    pub(crate) output_embeddings: Option<Array2<T>>,
    pub(crate) layers: Vec<Layer<T>>,
    pub(crate) final_norm: Array1<T>,
    pub(crate) adapters: BTreeMap<WeightId, LoraAdapter<T>>,
    pub(crate) base_frozen: bool,
}

/// splitmix64 step, used to derive independent per-tensor seeds.
pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || T::of(normal.sample(&mut rng)))
}

impl<T: Scalar> ModelState<T> {
    /// Deterministic random base for a given config seed.
    pub fn init(config: TransformerConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let seed = config.seed;
        let mut salt = 0u64;
        let mut next = |rows: usize, cols: usize, std: f64| {
            salt += 1;
            gaussian::<T>(rows, cols, std, derive_seed(seed, salt))
        };
        let embed_std = if config.tie_embeddings {
            1.0 / (d as f64).sqrt()
        } else {
            1.0
        };
        let input_embeddings = next(config.vocab_size, d, embed_std);
        let output_embeddings = if config.tie_embeddings {
            None
        } else {
            Some(next(config.vocab_size, d, 1.0 / (d as f64).sqrt()))
        };
        let layers = (0..config.n_layers)
            .map(|_| {
                let inv = |n: usize| 1.0 / (n as f64).sqrt();
                Layer {
                    attn_norm: Array1::ones(d),
                    wq: next(d, d, inv(d)),
                    wk: next(d, d, inv(d)),
                    wv: next(d, d, inv(d)),
                    wo: next(d, d, inv(d)),
                    ffn_norm: Array1::ones(d),
                    w_up: next(config.d_ff, d, inv(d)),
                    w_down: next(d, config.d_ff, inv(config.d_ff)),
                }
            })
            .collect();
        Ok(Self {
            input_embeddings,
            output_embeddings,
            layers,
            final_norm: Array1::ones(d),
            adapters: BTreeMap::new(),
            base_frozen: true,
            config,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn final_norm(&self) -> &Array1<T> {
        &self.final_norm
    }

    pub fn adapters(&self) -> &BTreeMap<WeightId, LoraAdapter<T>> {
        &self.adapters
    }

    pub fn adapter_mut(&mut self, id: WeightId) -> Option<&mut LoraAdapter<T>> {
        self.adapters.get_mut(&id)
    }

    pub fn input_embeddings(&self) -> &Array2<T> {
        &self.input_embeddings
    }

    /// The matrix that produces logits (the input matrix when tied).
    pub fn output_embeddings(&self) -> &Array2<T> {
        self.output_embeddings.as_ref().unwrap_or(&self.input_embeddings)
    }

    pub fn base_frozen(&self) -> bool {
        self.base_frozen
    }

    pub fn weight(&self, id: WeightId) -> &Array2<T> {
        self.layers[id.layer].weight(id.kind)
    }

    /// Embedding matrices then each adapter's A and B, in adapter order.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        let mut out = vec![ParamId::InputEmbeddings];
        if self.output_embeddings.is_some() {
            out.push(ParamId::OutputEmbeddings);
        }
        for id in self.adapters.keys() {
            out.push(ParamId::LoraA(*id));
            out.push(ParamId::LoraB(*id));
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<T>> {
        match id {
            ParamId::InputEmbeddings => Some(&self.input_embeddings),
            ParamId::OutputEmbeddings => self.output_embeddings.as_ref(),
            ParamId::LoraA(w) => self.adapters.get(&w).map(|a| &a.a),
            ParamId::LoraB(w) => self.adapters.get(&w).map(|a| &a.b),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Array2<T>> {
        match id {
            ParamId::InputEmbeddings => Some(&mut self.input_embeddings),
            ParamId::OutputEmbeddings => self.output_embeddings.as_mut(),
            ParamId::LoraA(w) => self.adapters.get_mut(&w).map(|a| &mut a.a),
            ParamId::LoraB(w) => self.adapters.get_mut(&w).map(|a| &mut a.b),
        }
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.trainable_parameters()
            .into_iter()
            .map(|p| self.param(p).map_or(0, |m| m.len()))
            .sum()
    }

    /// Grows both embedding matrices to `new_vocab_size` rows.
    ///
    /// Existing rows are untouched. Each new coordinate is drawn from a normal
    /// distribution with that column's empirical mean and standard deviation,
    /// then clamped to the column's observed range.
    pub fn expand_embeddings(&mut self, new_vocab_size: usize, seed: u64) -> Result<(), ModelError> {
        let old = self.config.vocab_size;
        if new_vocab_size < old {
            return Err(ModelError::ShrinkNotAllowed {
                old,
                new: new_vocab_size,
            });
        }
        if new_vocab_size == old {
            return Ok(());
        }
        self.input_embeddings = expand_rows(&self.input_embeddings, new_vocab_size, derive_seed(seed, 1));
        if let Some(out) = self.output_embeddings.as_mut() {
            *out = expand_rows(out, new_vocab_size, derive_seed(seed, 2));
        }
        self.config.vocab_size = new_vocab_size;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            input_embeddings: cast2(&self.input_embeddings),
            output_embeddings: self.output_embeddings.as_ref().map(cast2),
            layers: self.layers.iter().map(Layer::cast).collect(),
            final_norm: cast1(&self.final_norm),
            adapters: self.adapters.iter().map(|(k, v)| (*k, v.cast())).collect(),
            base_frozen: self.base_frozen,
        }
    }

    pub(crate) fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.context_len {
            return Err(ModelError::ContextOverflow {
                len: ids.len(),
                context_len: self.config.context_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::InvalidTokenId {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

fn expand_rows<T: Scalar>(m: &Array2<T>, new_rows: usize, seed: u64) -> Array2<T> {
    let (old_rows, cols) = m.dim();
    let n = old_rows as f64;
    let stats: Vec<(f64, f64, f64, f64)> = m
        .columns()
        .into_iter()
        .map(|col| {
            let mean = col.iter().map(|v| v.f64()).sum::<f64>() / n;
            let var = col.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
            let lo = col.iter().fold(f64::INFINITY, |a, v| a.min(v.f64()));
            let hi = col.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.f64()));
            (mean, var.sqrt(), lo, hi)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((new_rows, cols));
    out.slice_mut(ndarray::s![..old_rows, ..]).assign(m);
    for r in old_rows..new_rows {
        for (c, &(mean, std, lo, hi)) in stats.iter().enumerate() {
            let draw = Normal::new(mean, std).expect("finite moments").sample(&mut rng);
            // round-trip through T before clamping so the bound holds after casting
            let v = T::of(draw);
            out[[r, c]] = v.max(T::of(lo)).min(T::of(hi));
        }
    }
    out
}
