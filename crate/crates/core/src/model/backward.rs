use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use super::forward::{ForwardCache, LinearCache};
use super::{ModelState, ParamId, WeightId, WeightKind};
use crate::tensor::{rms_norm_backward, silu_grad, Scalar};

/// Gradients keyed by trainable parameter. Frozen matrices never appear.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar> {
    grads: BTreeMap<ParamId, Array2<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Array2<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => *acc += g,
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

impl<T: Scalar> ModelState<T> {
    /// Backpropagates `dlogits` (∂loss/∂logits, `positions × vocab`) through a
    /// cached forward pass, returning gradients for the trainable set only.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Array2<T>) -> Gradients<T> {
        let mut grads = BTreeMap::new();
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let d_out_emb = dlogits.t().dot(&cache.hidden);
        let d_hidden = dlogits.dot(self.output_embeddings());
        let mut dx = rms_norm_backward(&cache.x_final, &cache.rms_final, &self.final_norm, &d_hidden);

        for (li, lc) in cache.layers.iter().enumerate().rev() {
            let layer = &self.layers[li];

            let d_act = self.linear_backward(li, WeightKind::Down, lc.linear(WeightKind::Down), &dx, &mut grads);
            let du = &d_act * &lc.u.mapv(silu_grad);
            let dh2 = self.linear_backward(li, WeightKind::Up, lc.linear(WeightKind::Up), &du, &mut grads);
            let dx_mid = &dx + &rms_norm_backward(&lc.x_mid, &lc.rms2, &layer.ffn_norm, &dh2);

            let d_attn = self.linear_backward(li, WeightKind::Wo, lc.linear(WeightKind::Wo), &dx_mid, &mut grads);
            let mut dq = Array2::zeros(lc.q.raw_dim());
            let mut dk = Array2::zeros(lc.k.raw_dim());
            let mut dv = Array2::zeros(lc.v.raw_dim());
            for (h, p) in lc.probs.iter().enumerate() {
                let cols = s![.., h * dh..(h + 1) * dh];
                let d_out_h = d_attn.slice(cols);
                let dp = d_out_h.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&d_out_h));
                let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = p * &(&dp - &row_dot);
                dq.slice_mut(cols).assign(&(ds.dot(&lc.k.slice(cols)) * scale));
                dk.slice_mut(cols).assign(&(ds.t().dot(&lc.q.slice(cols)) * scale));
            }
            let mut dh1 = self.linear_backward(li, WeightKind::Wq, lc.linear(WeightKind::Wq), &dq, &mut grads);
            dh1 += &self.linear_backward(li, WeightKind::Wk, lc.linear(WeightKind::Wk), &dk, &mut grads);
            dh1 += &self.linear_backward(li, WeightKind::Wv, lc.linear(WeightKind::Wv), &dv, &mut grads);
            dx = &dx_mid + &rms_norm_backward(&lc.x_in, &lc.rms1, &layer.attn_norm, &dh1);
        }

        let mut d_in_emb = Array2::zeros((self.config.vocab_size, d));
        for (row, &id) in dx.rows().into_iter().zip(&cache.ids) {
            let mut target = d_in_emb.row_mut(id as usize);
            target += &row;
        }
        if self.output_embeddings.is_some() {
            grads.insert(ParamId::OutputEmbeddings, d_out_emb);
        } else {
            d_in_emb += &d_out_emb;
        }
        grads.insert(ParamId::InputEmbeddings, d_in_emb);
        Gradients { grads }
    }

    fn linear_backward(
        &self,
        layer: usize,
        kind: WeightKind,
        cache: &LinearCache<T>,
        dy: &Array2<T>,
        grads: &mut BTreeMap<ParamId, Array2<T>>,
    ) -> Array2<T> {
        let mut dx = dy.dot(self.layers[layer].weight(kind));
        let id = WeightId::new(layer, kind);
        if let Some(adapter) = self.adapters.get(&id) {
            let scale = adapter.scale();
            let z = cache.z.as_ref().expect("adapter cache");
            let dropped = cache.dropped.as_ref().expect("adapter cache");
            let g = dy.dot(&adapter.b);
            grads.insert(ParamId::LoraB(id), dy.t().dot(z) * scale);
            grads.insert(ParamId::LoraA(id), g.t().dot(dropped) * scale);
            let mut dx_adapter = g.dot(&adapter.a) * scale;
            if let Some(keep) = &cache.keep {
                dx_adapter *= keep;
            }
            dx += &dx_adapter;
        }
        dx
    }
}
