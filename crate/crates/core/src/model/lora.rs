use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{derive_seed, gaussian, ModelError, ModelState, WeightId};
use crate::tensor::{cast2, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout_p: 0.05,
            seed: 0,
        }
    }
}

/// Low-rank update `ΔW = (alpha / rank) · B·A` for one base matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar> {
    /// rank × d_in
    pub a: Array2<T>,
    /// d_out × rank
    pub b: Array2<T>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn scale(&self) -> T {
        T::of(self.alpha / self.rank as f64)
    }

    pub fn delta(&self) -> Array2<T> {
        self.b.dot(&self.a) * self.scale()
    }

    pub(crate) fn cast<U: Scalar>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            a: cast2(&self.a),
            b: cast2(&self.b),
            rank: self.rank,
            alpha: self.alpha,
            dropout_p: self.dropout_p,
        }
    }
}

impl<T: Scalar> ModelState<T> {
    /// Wraps each target matrix with an adapter. A ~ N(0, 1/rank), B = 0, so
    /// the model output is unchanged until B moves.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, targets: &[WeightId]) -> Result<(), ModelError> {
        if cfg.rank == 0 {
            return Err(ModelError::ConfigError("LoRA rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout_p) {
            return Err(ModelError::ConfigError(format!(
                "dropout {} outside [0, 1)",
                cfg.dropout_p
            )));
        }
        for id in targets {
            if id.layer >= self.layers.len() {
                return Err(ModelError::ConfigError(format!("{id} does not exist")));
            }
            if self.adapters.contains_key(id) {
                return Err(ModelError::AlreadyAdapted(*id));
            }
        }
        let std = (1.0 / cfg.rank as f64).sqrt();
        for id in targets {
            let (d_out, d_in) = self.weight(*id).dim();
            let salt = (id.layer as u64) << 8 | id.kind as u64;
            self.adapters.insert(
                *id,
                LoraAdapter {
                    a: gaussian(cfg.rank, d_in, std, derive_seed(cfg.seed, 1000 + salt)),
                    b: Array2::zeros((d_out, cfg.rank)),
                    rank: cfg.rank,
                    alpha: cfg.alpha,
                    dropout_p: cfg.dropout_p,
                },
            );
        }
        self.base_frozen = true;
        Ok(())
    }

    /// Folds every adapter into its base matrix and removes the adapters.
    pub fn merge_lora(&mut self) -> Result<(), ModelError> {
        if self.adapters.is_empty() {
            return Err(ModelError::NothingToMerge);
        }
        let adapters = std::mem::take(&mut self.adapters);
        for (id, adapter) in adapters {
            let w = self.layers[id.layer].weight_mut(id.kind);
            *w += &adapter.delta();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamId, TransformerConfig, WeightKind, MIN_VOCAB};

    fn adapted() -> ModelState<f32> {
        let mut m = ModelState::init(TransformerConfig::toy(MIN_VOCAB)).unwrap();
        m.attach_lora(&LoraConfig::default(), &WeightId::all(2)).unwrap();
        m
    }

    #[test]
    fn default_targets_cover_every_matrix() {
        let m = adapted();
        assert_eq!(m.adapters().len(), 6 * 2);
        assert_eq!(m.trainable_parameters().len(), 2 + 24);
        for p in m.trainable_parameters() {
            assert!(m.param(p).is_some());
        }
    }

    #[test]
    fn adapter_fields_echo_config() {
        let m = adapted();
        let a = &m.adapters()[&WeightId::new(0, WeightKind::Wq)];
        assert_eq!(a.rank, 8);
        assert_eq!(a.dropout_p, 0.05);
        assert_eq!(a.alpha, 16.0);
        assert!(a.b.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shapes_match_wrapped_weights() {
        let m = adapted();
        for (id, a) in m.adapters() {
            assert_eq!(a.delta().dim(), m.weight(*id).dim());
        }
    }

    #[test]
    fn duplicate_attach_rejected() {
        let mut m = adapted();
        let err = m
            .attach_lora(&LoraConfig::default(), &[WeightId::new(1, WeightKind::Up)])
            .unwrap_err();
        assert!(matches!(err, ModelError::AlreadyAdapted(_)));
    }

    #[test]
    fn merge_with_zero_b_is_exact_and_single_shot() {
        let base = ModelState::<f32>::init(TransformerConfig::toy(MIN_VOCAB)).unwrap();
        let mut m = adapted();
        m.merge_lora().unwrap();
        for (a, b) in m.layers().iter().zip(base.layers()) {
            assert_eq!(a, b);
        }
        assert!(matches!(m.merge_lora(), Err(ModelError::NothingToMerge)));
        assert_eq!(
            m.trainable_parameters(),
            vec![ParamId::InputEmbeddings, ParamId::OutputEmbeddings]
        );
    }
}
