use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{derive_seed, Gradients, Mode, ModelState};
use crate::tensor::{log_sum_exp, Scalar};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean negative log-likelihood over masked positions (nats).
    pub loss: f64,
    /// One entry per position; 0 where the mask is 0.
    pub per_token: Vec<f64>,
    pub n_masked: usize,
}

/// Masked next-token cross-entropy. `targets[t]` is the token expected after
/// position `t`.
pub fn clm_loss<T: Scalar>(logits: &Array2<T>, targets: &[TokenId], mask: &[u8]) -> Result<LossOutput, TrainError> {
    let (n, vocab) = logits.dim();
    if targets.len() != n || mask.len() != n {
        return Err(TrainError::ShapeMismatch(format!(
            "{n} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let mut per_token = vec![0.0; n];
    let mut total = 0.0;
    let mut n_masked = 0;
    for t in 0..n {
        if mask[t] == 0 {
            continue;
        }
        let target = targets[t] as usize;
        if target >= vocab {
            return Err(TrainError::ShapeMismatch(format!(
                "target {target} outside vocabulary of {vocab}"
            )));
        }
        let row = logits.row(t);
        let nll = log_sum_exp(row) - row[target].f64();
        per_token[t] = nll;
        total += nll;
        n_masked += 1;
    }
    if n_masked == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(LossOutput {
        loss: total / n_masked as f64,
        per_token,
        n_masked,
    })
}

/// ∂(sum of masked NLL × `weight`)/∂logits.
pub(crate) fn clm_loss_grad<T: Scalar>(logits: &Array2<T>, targets: &[TokenId], mask: &[u8], weight: f64) -> Array2<T> {
    let mut d = Array2::zeros(logits.raw_dim());
    for t in 0..logits.nrows() {
        if mask[t] == 0 {
            continue;
        }
        let row = logits.row(t);
        let lse = log_sum_exp(row);
        let mut drow = d.row_mut(t);
        for (o, &v) in drow.iter_mut().zip(row.iter()) {
            *o = T::of((v.f64() - lse).exp() * weight);
        }
        drow[targets[t] as usize] -= T::of(weight);
    }
    d
}

/// A rectangular batch. Rows shorter than the batch width are right-padded
/// with mask 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub input_ids: Vec<Vec<TokenId>>,
    pub target_ids: Vec<Vec<TokenId>>,
    pub loss_mask: Vec<Vec<u8>>,
}

/// One formatted example before padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRow {
    pub input_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub loss_mask: Vec<u8>,
}

impl BatchRow {
    /// Full next-token supervision over a block; the last position has no
    /// target and is masked.
    pub fn from_block(block: &[TokenId], pad_id: TokenId) -> Self {
        let mut target_ids = block[1..].to_vec();
        target_ids.push(pad_id);
        let mut loss_mask = vec![1u8; block.len()];
        *loss_mask.last_mut().expect("non-empty block") = 0;
        Self {
            input_ids: block.to_vec(),
            target_ids,
            loss_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }
}

impl Batch {
    pub fn from_rows(rows: &[BatchRow], pad_id: TokenId) -> Self {
        let width = rows.iter().map(BatchRow::len).max().unwrap_or(0);
        let pad = |v: &[TokenId]| {
            let mut v = v.to_vec();
            v.resize(width, pad_id);
            v
        };
        Self {
            input_ids: rows.iter().map(|r| pad(&r.input_ids)).collect(),
            target_ids: rows.iter().map(|r| pad(&r.target_ids)).collect(),
            loss_mask: rows
                .iter()
                .map(|r| {
                    let mut m = r.loss_mask.clone();
                    m.resize(width, 0);
                    m
                })
                .collect(),
        }
    }

    pub fn from_blocks(blocks: &[Vec<TokenId>], pad_id: TokenId) -> Self {
        let rows: Vec<BatchRow> = blocks.iter().map(|b| BatchRow::from_block(b, pad_id)).collect();
        Self::from_rows(&rows, pad_id)
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn masked_tokens(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m != 0).count()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.is_empty() {
            return Err(TrainError::ShapeMismatch("empty batch".into()));
        }
        if self.target_ids.len() != self.len() || self.loss_mask.len() != self.len() {
            return Err(TrainError::ShapeMismatch("row counts differ".into()));
        }
        let width = self.input_ids[0].len();
        for i in 0..self.len() {
            if self.input_ids[i].len() != width || self.target_ids[i].len() != width || self.loss_mask[i].len() != width
            {
                return Err(TrainError::ShapeMismatch(format!("row {i} is ragged")));
            }
            if !self.loss_mask[i].iter().any(|&m| m != 0) {
                return Err(TrainError::EmptyMask);
            }
        }
        Ok(())
    }
}

/// Mean masked loss over the whole batch and its gradient.
///
/// Each row runs its own forward/backward (in parallel); gradients are summed
/// in row order so the result does not depend on thread scheduling. With
/// `dropout_seed` set the model runs in train mode, row `i` drawing its masks
/// from a generator seeded by `(dropout_seed, i)`.
pub fn loss_and_gradients<T: Scalar>(
    m: &ModelState<T>,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients<T>), TrainError> {
    batch.validate()?;
    let total = batch.masked_tokens();
    let weight = 1.0 / total as f64;
    let per_row: Vec<Result<(f64, Gradients<T>), TrainError>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mask = &batch.loss_mask[i];
            // positions after the last supervised one cannot affect the loss
            let len = mask.iter().rposition(|&x| x != 0).expect("validated") + 1;
            let ids = &batch.input_ids[i][..len];
            let targets = &batch.target_ids[i][..len];
            let mask = &mask[..len];
            let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(derive_seed(s, i as u64)));
            let mode = match rng.as_mut() {
                Some(r) => Mode::Train(r),
                None => Mode::Eval,
            };
            let (logits, cache) = m.forward_cached(ids, mode)?;
            let out = clm_loss(&logits, targets, mask)?;
            let dlogits = clm_loss_grad(&logits, targets, mask, weight);
            Ok((out.loss * out.n_masked as f64, m.backward(&cache, &dlogits)))
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut grads: Option<Gradients<T>> = None;
    for r in per_row {
        let (l, g) = r?;
        loss_sum += l;
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    Ok((loss_sum * weight, grads.expect("non-empty batch")))
}

/// Gradients of the mean masked loss over the trainable set (eval mode).
pub fn backward<T: Scalar>(m: &ModelState<T>, batch: &Batch) -> Result<Gradients<T>, TrainError> {
    loss_and_gradients(m, batch, None).map(|(_, g)| g)
}

/// Eval-mode mean masked loss of a batch.
pub fn batch_loss<T: Scalar>(m: &ModelState<T>, batch: &Batch) -> Result<f64, TrainError> {
    batch.validate()?;
    let mut sum = 0.0;
    for i in 0..batch.len() {
        let logits = m.forward(&batch.input_ids[i])?;
        let out = clm_loss(&logits, &batch.target_ids[i], &batch.loss_mask[i])?;
        sum += out.loss * out.n_masked as f64;
    }
    Ok(sum / batch.masked_tokens() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraConfig, ParamId, TransformerConfig, WeightId, MIN_VOCAB};
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = Array2::<f32>::zeros((3, 4));
        let out = clm_loss(&logits, &[0, 1, 2], &[1, 1, 1]).unwrap();
        for l in out.per_token {
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_target_is_near_zero() {
        let logits = array![[0.0f64, 1e9, 0.0]];
        assert!(clm_loss(&logits, &[1], &[1]).unwrap().loss.abs() < 1e-9);
    }

    #[test]
    fn matches_scalar_softmax_oracle() {
        let logits = array![[2.0f64, 0.0, 0.0, 0.0]];
        let e2 = 2f64.exp();
        let oracle = -(e2 / (e2 + 3.0)).ln();
        let got = clm_loss(&logits, &[0], &[1]).unwrap().loss;
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_rejected() {
        let logits = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            clm_loss(&logits, &[0, 1], &[0, 0]),
            Err(TrainError::EmptyMask)
        ));
    }

    #[test]
    fn masked_targets_are_ignored() {
        let logits = array![[0.3f64, -1.0, 2.0], [1.0, 0.0, 0.5]];
        let a = clm_loss(&logits, &[2, 0], &[1, 0]).unwrap().loss;
        let b = clm_loss(&logits, &[2, 1], &[1, 0]).unwrap().loss;
        assert_eq!(a, b);
    }

    fn adapted() -> ModelState<f64> {
        let mut cfg = TransformerConfig::toy(MIN_VOCAB);
        cfg.d_model = 16;
        cfg.d_ff = 32;
        cfg.context_len = 8;
        let mut m = ModelState::<f64>::init(cfg).unwrap();
        m.attach_lora(&LoraConfig::default(), &WeightId::all(2)).unwrap();
        m
    }

    #[test]
    fn frozen_matrices_have_no_gradient() {
        let m = adapted();
        let batch = Batch::from_blocks(&[vec![1, 2, 3, 4]], 258);
        let g = backward(&m, &batch).unwrap();
        let ids: Vec<ParamId> = g.iter().map(|(k, _)| *k).collect();
        let mut expected = m.trainable_parameters();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn per_token_gradient_matches_finite_differences() {
        // nudge B off zero so every path carries signal
        let mut m = adapted();
        let id = WeightId::all(2)[0];
        m.adapter_mut(id).unwrap().b.mapv_inplace(|_| 0.01);
        for mask in [vec![0u8, 1, 0], vec![1u8, 1, 0]] {
            let batch = Batch {
                input_ids: vec![vec![7, 8, 9]],
                target_ids: vec![vec![8, 9, 258]],
                loss_mask: vec![mask],
            };
            let g = backward(&m, &batch).unwrap();
            let h = 1e-5;
            for pid in [ParamId::LoraB(id), ParamId::LoraA(id), ParamId::InputEmbeddings] {
                let analytic = g.get(pid).unwrap();
                for idx in [(0usize, 0usize), (1, 3), (7, 2)] {
                    if idx.0 >= analytic.nrows() {
                        continue;
                    }
                    let mut p = m.clone();
                    p.param_mut(pid).unwrap()[idx] += h;
                    let mut q = m.clone();
                    q.param_mut(pid).unwrap()[idx] -= h;
                    let fd = (batch_loss(&p, &batch).unwrap() - batch_loss(&q, &batch).unwrap()) / (2.0 * h);
                    let a = analytic[idx];
                    assert!((a - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{pid} {idx:?}: {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn padding_does_not_change_loss_or_gradient() {
        let m = adapted();
        let short = BatchRow::from_block(&[3, 4, 5], 258);
        let long = BatchRow::from_block(&[6, 7, 8, 9, 10], 258);
        let solo = Batch::from_rows(std::slice::from_ref(&short), 258);
        let both = Batch::from_rows(&[short, long.clone()], 258);
        let other = Batch::from_rows(&[long], 258);
        let (l_both, _) = loss_and_gradients(&m, &both, None).unwrap();
        let l_solo = batch_loss(&m, &solo).unwrap();
        let l_other = batch_loss(&m, &other).unwrap();
        let expected = (l_solo * 2.0 + l_other * 4.0) / 6.0;
        assert!((l_both - expected).abs() < 1e-12);
    }

    #[test]
    fn dropout_gradients_are_seeded() {
        let m = adapted();
        let batch = Batch::from_blocks(&[vec![1, 2, 3, 4], vec![5, 6, 7, 8]], 258);
        let a = loss_and_gradients(&m, &batch, Some(3)).unwrap();
        let b = loss_and_gradients(&m, &batch, Some(3)).unwrap();
        assert_eq!(a, b);
    }
}
