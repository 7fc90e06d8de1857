//! Scalar abstraction and the few dense kernels the transformer needs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type of model tensors. Checkpoints hold `f32`; the
/// same code runs in `f64` for finite-difference checks.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Sum
    + Default
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub fn cast2<A: Scalar, B: Scalar>(m: &Array2<A>) -> Array2<B> {
    m.mapv(|x| B::of(x.f64()))
}

pub fn cast1<A: Scalar, B: Scalar>(v: &Array1<A>) -> Array1<B> {
    v.mapv(|x| B::of(x.f64()))
}

/// Row-wise RMS normalisation. Returns the normalised rows and each row's
/// root-mean-square (including `eps`).
pub fn rms_norm<T: Scalar>(x: &Array2<T>, gain: &Array1<T>, eps: T) -> (Array2<T>, Array1<T>) {
    let d = T::of(x.ncols() as f64);
    let rms: Array1<T> = x
        .rows()
        .into_iter()
        .map(|row| (row.iter().map(|v| *v * *v).sum::<T>() / d + eps).sqrt())
        .collect();
    let mut y = x.clone();
    for (mut row, r) in y.rows_mut().into_iter().zip(rms.iter()) {
        Zip::from(&mut row).and(gain).for_each(|v, g| *v = *v / *r * *g);
    }
    (y, rms)
}

pub fn rms_norm_backward<T: Scalar>(x: &Array2<T>, rms: &Array1<T>, gain: &Array1<T>, dy: &Array2<T>) -> Array2<T> {
    let d = T::of(x.ncols() as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    for (((mut dxr, xr), dyr), r) in dx.rows_mut().into_iter().zip(x.rows()).zip(dy.rows()).zip(rms.iter()) {
        let dot: T = Zip::from(&xr)
            .and(&dyr)
            .and(gain)
            .fold(T::zero(), |acc, xv, dv, g| acc + *xv * *dv * *g);
        let coef = dot / (d * *r * *r * *r);
        Zip::from(&mut dxr)
            .and(&xr)
            .and(&dyr)
            .and(gain)
            .for_each(|o, xv, dv, g| *o = *dv * *g / *r - *xv * coef);
    }
    dx
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// In-place softmax of every row.
pub fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `log(sum(exp(row)))` evaluated in double precision.
pub fn log_sum_exp<T: Scalar>(row: ArrayView1<T>) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.f64()));
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
    max + sum.ln()
}

/// Gathers rows of `table` by index.
pub fn gather_rows<T: Scalar>(table: ArrayView2<T>, ids: &[u32]) -> Array2<T> {
    table.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_normalise() {
        let mut m = array![[1.0f64, 2.0, 3.0], [0.0, 0.0, 0.0]];
        softmax_rows(&mut m);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((m[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rms_norm_backward_matches_finite_differences() {
        let x = array![[0.3f64, -1.2, 0.7, 2.0], [1.0, 0.5, -0.25, 0.1]];
        let g = array![1.0f64, 0.5, 2.0, -1.0];
        let w = array![[0.1f64, 0.2, -0.3, 0.4], [-0.5, 0.6, 0.7, -0.8]];
        let loss = |x: &Array2<f64>| (rms_norm(x, &g, 1e-6).0 * &w).sum();
        let (_, rms) = rms_norm(&x, &g, 1e-6);
        let dx = rms_norm_backward(&x, &rms, &g, &w);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn silu_grad_matches_finite_differences() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.8, 4.0] {
            let fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
