use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ModelError, ModelState, WeightId, WeightKind, NORM_EPS};
use crate::tensor::{gather_rows, rms_norm, silu, softmax_rows, Scalar};
use crate::tokenizer::TokenId;

/// Eval mode is deterministic. Train mode samples adapter-input dropout masks
/// from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(rng),
        }
    }
}

pub(crate) struct LinearCache<T: Scalar> {
    /// Adapter input after dropout; `None` when no adapter is attached.
    pub dropped: Option<Array2<T>>,
    /// Per-element dropout multipliers (0 or 1/(1-p)); `None` when inactive.
    pub keep: Option<Array2<T>>,
    /// `dropped · Aᵀ`
    pub z: Option<Array2<T>>,
}

pub(crate) struct LayerCache<T: Scalar> {
    pub x_in: Array2<T>,
    pub rms1: Array1<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub probs: Vec<Array2<T>>,
    pub lin: Vec<LinearCache<T>>,
    pub x_mid: Array2<T>,
    pub rms2: Array1<T>,
    pub u: Array2<T>,
}

impl<T: Scalar> LayerCache<T> {
    pub fn linear(&self, kind: WeightKind) -> &LinearCache<T> {
        &self.lin[kind as usize]
    }
}

/// Activations retained for the backward pass.
pub struct ForwardCache<T: Scalar> {
    pub(crate) ids: Vec<TokenId>,
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) x_final: Array2<T>,
    pub(crate) rms_final: Array1<T>,
    pub(crate) hidden: Array2<T>,
}

/// Fixed sinusoidal position table, `positions × d`.
pub(crate) fn positional<T: Scalar>(positions: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((positions, d), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
        T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<T: Scalar> ModelState<T> {
    /// Eval-mode logits, `positions × vocab_size`.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Array2<T>, ModelError> {
        self.forward_mode(ids, Mode::Eval)
    }

    pub fn forward_mode(&self, ids: &[TokenId], mode: Mode<'_>) -> Result<Array2<T>, ModelError> {
        let hidden = self.run(ids, mode, None)?;
        Ok(hidden.dot(&self.output_embeddings().t()))
    }

    /// Final normalised hidden states (the input of the output projection).
    pub fn hidden_states(&self, ids: &[TokenId]) -> Result<Array2<T>, ModelError> {
        self.run(ids, Mode::Eval, None)
    }

    pub fn forward_cached(&self, ids: &[TokenId], mode: Mode<'_>) -> Result<(Array2<T>, ForwardCache<T>), ModelError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut finals = None;
        let hidden = self.run(ids, mode, Some((&mut layers, &mut finals)))?;
        let logits = hidden.dot(&self.output_embeddings().t());
        let (x_final, rms_final) = finals.expect("filled by run");
        Ok((
            logits,
            ForwardCache {
                ids: ids.to_vec(),
                layers,
                x_final,
                rms_final,
                hidden,
            },
        ))
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        ids: &[TokenId],
        mut mode: Mode<'_>,
        mut cache: Option<(&mut Vec<LayerCache<T>>, &mut Option<(Array2<T>, Array1<T>)>)>,
    ) -> Result<Array2<T>, ModelError> {
        self.check_ids(ids)?;
        let n = ids.len();
        let d = self.config.d_model;
        let eps = T::of(NORM_EPS);
        let mut x = gather_rows(self.input_embeddings.view(), ids) + positional::<T>(n, d);

        for (li, layer) in self.layers.iter().enumerate() {
            let keep_cache = cache.is_some();
            let mut lin = Vec::with_capacity(6);
            let (h1, rms1) = rms_norm(&x, &layer.attn_norm, eps);
            let (q, cq) = self.linear(li, WeightKind::Wq, &h1, &mut mode);
            let (k, ck) = self.linear(li, WeightKind::Wk, &h1, &mut mode);
            let (v, cv) = self.linear(li, WeightKind::Wv, &h1, &mut mode);
            let (attn, probs) = self.attention(&q, &k, &v, keep_cache);
            let (a, co) = self.linear(li, WeightKind::Wo, &attn, &mut mode);
            let x_mid = &x + &a;
            let (h2, rms2) = rms_norm(&x_mid, &layer.ffn_norm, eps);
            let (u, cu) = self.linear(li, WeightKind::Up, &h2, &mut mode);
            let act = u.mapv(silu);
            let (f, cd) = self.linear(li, WeightKind::Down, &act, &mut mode);
            let x_out = &x_mid + &f;
            if let Some((layers, _)) = cache.as_mut() {
                lin.extend([cq, ck, cv, co, cu, cd]);
                layers.push(LayerCache {
                    x_in: x,
                    rms1,
                    q,
                    k,
                    v,
                    probs,
                    lin,
                    x_mid,
                    rms2,
                    u,
                });
            }
            x = x_out;
        }

        let (hidden, rms_f) = rms_norm(&x, &self.final_norm, eps);
        if let Some((_, finals)) = cache {
            *finals = Some((x, rms_f));
        }
        Ok(hidden)
    }

    /// `x · Wᵀ + (alpha/r) · (drop(x) · Aᵀ) · Bᵀ`
    fn linear(
        &self,
        layer: usize,
        kind: WeightKind,
        x: &Array2<T>,
        mode: &mut Mode<'_>,
    ) -> (Array2<T>, LinearCache<T>) {
        let w = self.layers[layer].weight(kind);
        let mut y = x.dot(&w.t());
        let mut cache = LinearCache {
            dropped: None,
            keep: None,
            z: None,
        };
        if let Some(adapter) = self.adapters.get(&WeightId::new(layer, kind)) {
            let (dropped, keep) = match mode.rng() {
                Some(rng) if adapter.dropout_p > 0.0 => {
                    let p = adapter.dropout_p;
                    let kept = T::of(1.0 / (1.0 - p));
                    let keep = Array2::from_shape_simple_fn(x.raw_dim(), || {
                        if rng.random::<f64>() < p {
                            T::zero()
                        } else {
                            kept
                        }
                    });
                    (x * &keep, Some(keep))
                }
                _ => (x.clone(), None),
            };
            let z = dropped.dot(&adapter.a.t());
            y = y + z.dot(&adapter.b.t()) * adapter.scale();
            cache.dropped = Some(dropped);
            cache.keep = keep;
            cache.z = Some(z);
        }
        (y, cache)
    }

    fn attention(&self, q: &Array2<T>, k: &Array2<T>, v: &Array2<T>, keep_probs: bool) -> (Array2<T>, Vec<Array2<T>>) {
        let n = q.nrows();
        let dh = self.config.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros(q.raw_dim());
        let mut all = Vec::new();
        for h in 0..self.config.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for i in 0..n {
                for j in i + 1..n {
                    scores[[i, j]] = T::neg_infinity();
                }
            }
            softmax_rows(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            if keep_probs {
                all.push(scores);
            }
        }
        (out, all)
    }

    /// Greedy continuation of `prompt`, stopping at `stop` or after `max_new`
    /// tokens. The window slides when the context fills.
    pub fn generate_greedy(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        stop: Option<TokenId>,
    ) -> Result<Vec<TokenId>, ModelError> {
        let ctx = self.config.context_len;
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let start = seq.len().saturating_sub(ctx);
            let logits = self.forward(&seq[start..])?;
            let last = logits.row(logits.nrows() - 1);
            let next = last
                .iter()
                .enumerate()
                .fold(
                    (0usize, T::neg_infinity()),
                    |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    },
                )
                .0 as TokenId;
            if Some(next) == stop {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}
