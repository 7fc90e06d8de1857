use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_gradients, Batch};
use super::TrainError;
use crate::model::{derive_seed, ModelState, ParamId};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for the trainable set plus the dropout seed used to derive
/// per-step masks.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub dropout_seed: u64,
    moments: BTreeMap<ParamId, (Array2<T>, Array2<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(m: &ModelState<T>, config: AdamConfig, dropout_seed: u64) -> Self {
        let moments = m
            .trainable_parameters()
            .into_iter()
            .map(|id| {
                let shape = m.param(id).expect("trainable").raw_dim();
                (id, (Array2::zeros(shape), Array2::zeros(shape)))
            })
            .collect();
        Self {
            config,
            step: 0,
            dropout_seed,
            moments,
        }
    }

    pub fn tracked(&self) -> impl Iterator<Item = &ParamId> {
        self.moments.keys()
    }
}

/// One Adam update on `batch`. On a non-finite loss nothing is modified.
pub fn train_step<T: Scalar>(
    m: &mut ModelState<T>,
    opt: &mut OptimizerState<T>,
    batch: &Batch,
) -> Result<StepMetrics, TrainError> {
    let seed = derive_seed(opt.dropout_seed, opt.step);
    let (loss, grads) = loss_and_gradients(m, batch, Some(seed))?;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss(loss));
    }
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(TrainError::NonFiniteLoss(loss));
    }

    opt.step += 1;
    let c = &opt.config;
    let t = opt.step as i32;
    let b1 = T::of(c.beta1);
    let b2 = T::of(c.beta2);
    let one = T::one();
    let bias1 = T::of(1.0 - c.beta1.powi(t));
    let bias2 = T::of(1.0 - c.beta2.powi(t));
    let lr = T::of(c.learning_rate);
    let eps = T::of(c.epsilon);
    for (id, g) in grads.iter() {
        let (m1, m2) = opt
            .moments
            .entry(*id)
            .or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())));
        let p = m.param_mut(*id).expect("gradient for a trainable parameter");
        Zip::from(p).and(m1).and(m2).and(g).for_each(|p, m1, m2, &g| {
            *m1 = b1 * *m1 + (one - b1) * g;
            *m2 = b2 * *m2 + (one - b2) * g * g;
            let m_hat = *m1 / bias1;
            let v_hat = *m2 / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(StepMetrics { loss, grad_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraConfig, TransformerConfig, WeightId, MIN_VOCAB};

    fn setup() -> (ModelState<f32>, Batch) {
        let mut cfg = TransformerConfig::toy(MIN_VOCAB);
        cfg.d_model = 32;
        cfg.d_ff = 64;
        cfg.context_len = 16;
        let mut m = ModelState::init(cfg).unwrap();
        m.attach_lora(&LoraConfig::default(), &WeightId::all(2)).unwrap();
        let batch = Batch::from_blocks(&[b"hello world!".iter().map(|&b| b as u32).collect()], 258);
        (m, batch)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (mut m, batch) = setup();
        let before = m.clone();
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(&m, cfg, 0);
        let metrics = train_step(&mut m, &mut opt, &batch).unwrap();
        assert!(metrics.loss > 0.0);
        assert_eq!(m, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn moments_track_only_trainables() {
        let (m, _) = setup();
        let opt = OptimizerState::new(&m, AdamConfig::default(), 0);
        let mut expected = m.trainable_parameters();
        expected.sort();
        assert_eq!(opt.tracked().copied().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn overfits_one_batch_and_keeps_base_frozen() {
        let (mut m, batch) = setup();
        let layers = m.layers().to_vec();
        let norm = m.final_norm().clone();
        let cfg = AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(&m, cfg, 0);
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(train_step(&mut m, &mut opt, &batch).unwrap().loss);
        }
        assert!(losses[199] < 0.1 * losses[0], "{} -> {}", losses[0], losses[199]);
        let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
        let tail: Vec<f64> = losses[100..].windows(10).map(avg).collect();
        assert!(tail.first() >= tail.last());
        assert_eq!(m.layers(), &layers[..]);
        assert_eq!(m.final_norm(), &norm);
    }

    #[test]
    fn non_finite_loss_leaves_state() {
        let (mut m, batch) = setup();
        m.param_mut(ParamId::OutputEmbeddings).unwrap()[[0, 0]] = f32::NAN;
        let before = m.clone();
        let mut opt = OptimizerState::new(&m, AdamConfig::default(), 0);
        let opt_before = opt.clone();
        assert!(matches!(
            train_step(&mut m, &mut opt, &batch),
            Err(TrainError::NonFiniteLoss(_))
        ));
        // NaN != NaN, so compare through the debug rendering
        assert_eq!(format!("{m:?}"), format!("{before:?}"));
        assert_eq!(opt, opt_before);
    }
}
