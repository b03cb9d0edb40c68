//! Per-shape layer normalization over the embedding width.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::params::{slice1, slice1_mut, ParamGroup};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S> {
    pub scale: Array1<S>,
    pub offset: Array1<S>,
    /// Position in the block stack, used for tensor names.
    pub index: usize,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize, index: usize) -> Self {
        Self {
            scale: Array1::ones(d),
            offset: Array1::zeros(d),
            index,
        }
    }

    pub fn zeros(d: usize, index: usize) -> Self {
        Self {
            scale: Array1::zeros(d),
            offset: Array1::zeros(d),
            index,
        }
    }
}

impl<S: Scalar> ParamGroup<S> for LayerNorm<S> {
    fn tensors(&self) -> Vec<(String, &[S])> {
        vec![
            (format!("norm{}.scale", self.index), slice1(&self.scale)),
            (format!("norm{}.offset", self.index), slice1(&self.offset)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        let i = self.index;
        vec![
            (format!("norm{i}.scale"), slice1_mut(&mut self.scale)),
            (format!("norm{i}.offset"), slice1_mut(&mut self.offset)),
        ]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<S> {
    pub normalized: Array2<S>,
    pub inv_std: Array1<S>,
}

pub(crate) fn norm_forward<S: Scalar>(rows: ArrayView2<S>, ln: &LayerNorm<S>) -> (Array2<S>, NormCache<S>) {
    let d = S::lit(rows.ncols() as f64);
    let eps = S::lit(LAYER_NORM_EPS);
    let mut normalized = rows.to_owned();
    let mut inv_std = Array1::zeros(rows.nrows());
    for (mut r, is) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = r.sum() / d;
        let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
        let inv = S::one() / (var + eps).sqrt();
        r.mapv_inplace(|v| (v - mean) * inv);
        *is = inv;
    }
    let out = &normalized * &ln.scale + &ln.offset;
    (out, NormCache { normalized, inv_std })
}

pub(crate) fn norm_backward<S: Scalar>(
    cache: &NormCache<S>,
    grad_out: ArrayView2<S>,
    ln: &LayerNorm<S>,
    grads: &mut LayerNorm<S>,
) -> Array2<S> {
    grads.scale += &(&grad_out * &cache.normalized).sum_axis(Axis(0));
    grads.offset += &grad_out.sum_axis(Axis(0));
    let d = S::lit(grad_out.ncols() as f64);
    let mut dx = Array2::zeros(grad_out.raw_dim());
    for (((mut out, g), xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(grad_out.rows())
        .zip(cache.normalized.rows())
        .zip(&cache.inv_std)
    {
        let dxh: Array1<S> = &g * &ln.scale;
        let sum = dxh.sum();
        let dot = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>();
        for ((o, &a), &b) in out.iter_mut().zip(&dxh).zip(xh) {
            *o = inv / d * (d * a - sum - b * dot);
        }
    }
    dx
}
