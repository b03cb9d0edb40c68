//! Shared inter-shape expert: each soft shape is one point of a sequence
//! with `d` channels, processed by a 1×1 bottleneck and parallel
//! same-padded convolutions of different widths whose outputs are averaged.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{slice1, slice1_mut, slice2, slice2_mut, uniform1, uniform2, ParamGroup};
use crate::scalar::Scalar;

pub const DEFAULT_KERNELS: [usize; 3] = [3, 5, 9];

/// Kernel length actually used on a sequence of `num` points: clamped to
/// `num`, then reduced to the nearest odd value.
pub fn effective_kernel(kernel: usize, num: usize) -> usize {
    let k = kernel.min(num).max(1);
    if k.is_multiple_of(2) {
        k - 1
    } else {
        k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch<S> {
    pub kernel_size: usize,
    /// `d_out × (kernel_size · d_in)`, column `t·d + c` is tap `t` of input channel `c`.
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedExpertParams<S> {
    /// Bias-free `d × d` pointwise projection applied first, if enabled.
    pub bottleneck: Option<Array2<S>>,
    pub branches: Vec<ConvBranch<S>>,
}

impl<S: Scalar> SharedExpertParams<S> {
    pub fn zeros(d: usize, kernels: &[usize], bottleneck: bool) -> Self {
        Self {
            bottleneck: bottleneck.then(|| Array2::zeros((d, d))),
            branches: kernels
                .iter()
                .map(|&k| ConvBranch {
                    kernel_size: k,
                    weight: Array2::zeros((d, k * d)),
                    bias: Array1::zeros(d),
                })
                .collect(),
        }
    }

    pub fn init<R: Rng>(d: usize, kernels: &[usize], bottleneck: bool, rng: &mut R) -> Self {
        let pw = (1.0 / d as f64).sqrt();
        Self {
            bottleneck: bottleneck.then(|| uniform2(rng, d, d, pw)),
            branches: kernels
                .iter()
                .map(|&k| {
                    let bound = (1.0 / (k * d) as f64).sqrt();
                    ConvBranch {
                        kernel_size: k,
                        weight: uniform2(rng, d, k * d, bound),
                        bias: uniform1(rng, d, bound),
                    }
                })
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.branches.first().map_or(0, |b| b.bias.len())
    }
}

impl<S: Scalar> ParamGroup<S> for SharedExpertParams<S> {
    fn tensors(&self) -> Vec<(String, &[S])> {
        let mut v = Vec::new();
        if let Some(b) = &self.bottleneck {
            v.push(("shared.bottleneck".to_string(), slice2(b)));
        }
        for (i, br) in self.branches.iter().enumerate() {
            v.push((format!("shared.branch{i}.weight"), slice2(&br.weight)));
            v.push((format!("shared.branch{i}.bias"), slice1(&br.bias)));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        let mut v = Vec::new();
        if let Some(b) = &mut self.bottleneck {
            v.push(("shared.bottleneck".to_string(), slice2_mut(b)));
        }
        for (i, br) in self.branches.iter_mut().enumerate() {
            v.push((format!("shared.branch{i}.weight"), slice2_mut(&mut br.weight)));
            v.push((format!("shared.branch{i}.bias"), slice1_mut(&mut br.bias)));
        }
        v
    }
}

/// `B × Num × d` shapes as a `B × d × Num` channel-major sequence.
pub fn sequence_view<S: Scalar>(shapes: ArrayView3<S>) -> Array3<S> {
    shapes.permuted_axes([0, 2, 1]).as_standard_layout().into_owned()
}

#[derive(Debug, Clone)]
pub(crate) struct InterCache<S> {
    /// One im2col matrix per branch.
    pub columns: Vec<Array2<S>>,
    pub group: usize,
}

fn im2col<S: Scalar>(u: &Array2<S>, group: usize, k: usize) -> Array2<S> {
    let d = u.ncols();
    let half = (k - 1) / 2;
    let mut col = Array2::zeros((u.nrows(), k * d));
    for (b, chunk) in u.axis_chunks_iter(Axis(0), group).enumerate() {
        for i in 0..group {
            let mut row = col.row_mut(b * group + i);
            for t in 0..k {
                let src = i + t;
                if src < half || src - half >= group {
                    continue;
                }
                row.slice_mut(s![t * d..(t + 1) * d]).assign(&chunk.row(src - half));
            }
        }
    }
    col
}

fn col2im<S: Scalar>(dcol: &Array2<S>, group: usize, k: usize, d: usize) -> Array2<S> {
    let half = (k - 1) / 2;
    let mut du = Array2::zeros((dcol.nrows(), d));
    let blocks = dcol.nrows() / group;
    for b in 0..blocks {
        for i in 0..group {
            let row = dcol.row(b * group + i);
            for t in 0..k {
                let src = i + t;
                if src < half || src - half >= group {
                    continue;
                }
                let mut target = du.row_mut(b * group + src - half);
                target += &row.slice(s![t * d..(t + 1) * d]);
            }
        }
    }
    du
}

fn tap_range(kernel: usize, effective: usize, d: usize) -> std::ops::Range<usize> {
    let off = (kernel - effective) / 2;
    off * d..(off + effective) * d
}

/// Batched forward on stacked rows, `group` rows per sample.
pub(crate) fn inter_forward<S: Scalar>(
    rows: ArrayView2<S>,
    group: usize,
    params: &SharedExpertParams<S>,
) -> (Array2<S>, InterCache<S>) {
    let d = rows.ncols();
    let projected = match &params.bottleneck {
        Some(p) => rows.dot(&p.t()),
        None => rows.to_owned(),
    };
    let scale = S::one() / S::lit(params.branches.len() as f64);
    let mut out = Array2::zeros(rows.raw_dim());
    let mut columns = Vec::with_capacity(params.branches.len());
    for br in &params.branches {
        let k = effective_kernel(br.kernel_size, group);
        let col = im2col(&projected, group, k);
        let w = br.weight.slice(s![.., tap_range(br.kernel_size, k, d)]);
        let mut v = col.dot(&w.t());
        v += &br.bias;
        out.scaled_add(scale, &v);
        columns.push(col);
    }
    (
        out,
        InterCache {
            columns,
            group,
        },
    )
}

pub(crate) fn inter_backward<S: Scalar>(
    rows: ArrayView2<S>,
    cache: &InterCache<S>,
    grad_out: ArrayView2<S>,
    params: &SharedExpertParams<S>,
    grads: &mut SharedExpertParams<S>,
) -> Array2<S> {
    let d = rows.ncols();
    let scale = S::one() / S::lit(params.branches.len() as f64);
    let dv = grad_out.mapv(|g| g * scale);
    let mut du = Array2::zeros(rows.raw_dim());
    for ((br, gbr), col) in params.branches.iter().zip(&mut grads.branches).zip(&cache.columns) {
        let k = effective_kernel(br.kernel_size, cache.group);
        let range = tap_range(br.kernel_size, k, d);
        let mut gw = gbr.weight.slice_mut(s![.., range.clone()]);
        gw += &dv.t().dot(col);
        gbr.bias += &dv.sum_axis(Axis(0));
        let w = br.weight.slice(s![.., range]);
        let dcol = dv.dot(&w);
        du += &col2im(&dcol, cache.group, k, d);
    }
    match (&params.bottleneck, &mut grads.bottleneck) {
        (Some(p), Some(gp)) => {
            *gp += &du.t().dot(&rows);
            du.dot(p)
        }
        _ => du,
    }
}

/// Applies the shared expert to a `B × Num × d` batch.
pub fn shared_expert_forward<S: Scalar>(
    shapes: ArrayView3<S>,
    params: &SharedExpertParams<S>,
) -> Result<Array3<S>> {
    let (b, num, d) = shapes.dim();
    if num == 0 {
        return Err(Error::Dimension("shared expert needs at least one shape".into()));
    }
    if params.width() != d {
        return Err(Error::Dimension(format!(
            "shared expert width {} does not match {d}",
            params.width()
        )));
    }
    let stacked = shapes
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * num, d))
        .expect("contiguous");
    let (out, _) = inter_forward(stacked.view(), num, params);
    Ok(out.into_shape_with_order((b, num, d)).expect("contiguous"))
}
