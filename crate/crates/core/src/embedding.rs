//! Sliding-window shape embedding.
//!
//! Each window of length `m` taken every `q` steps is projected to `d`
//! channels by a full-window convolution filter bank, then a learnable
//! positional row is added.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal2, slice1, slice1_mut, slice2, slice2_mut, uniform1, uniform2, ParamGroup};
use crate::scalar::Scalar;

/// Number of windows of length `m` with stride `q` in a series of length `t`.
pub fn count_shapes(t: usize, m: usize, q: usize) -> Result<usize> {
    if m > t {
        return Err(Error::WindowTooLong { m, t });
    }
    if m == 0 || q == 0 {
        return Err(Error::Config(format!("window {m} and stride {q} must be positive")));
    }
    Ok((t - m) / q + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeConfig {
    /// Window length.
    pub m: usize,
    /// Stride.
    pub q: usize,
    /// Embedding width.
    pub d: usize,
    /// Series length.
    pub series_len: usize,
}

impl ShapeConfig {
    pub fn new(m: usize, q: usize, d: usize, series_len: usize) -> Result<Self> {
        if m < 2 || m + 1 > series_len {
            return Err(Error::Config(format!(
                "shape length {m} outside [2, {}]",
                series_len.saturating_sub(1)
            )));
        }
        if q < 1 || q > m {
            return Err(Error::Config(format!("stride {q} outside [1, {m}]")));
        }
        if d < 1 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        Ok(Self { m, q, d, series_len })
    }

    pub fn shape_count(&self) -> usize {
        (self.series_len - self.m) / self.q + 1
    }

    pub fn shape_starts(&self) -> Vec<usize> {
        (0..self.shape_count()).map(|j| j * self.q).collect()
    }
}

/// How windows are projected to embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    /// Full-window convolution with per-channel bias.
    #[default]
    Conv,
    /// Bias-free flat linear projection of each window.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams<S> {
    pub kind: EmbedKind,
    /// `d × m` filter bank.
    pub kernel: Array2<S>,
    /// Per-channel bias (unused for [`EmbedKind::Linear`]).
    pub bias: Array1<S>,
    /// `rows × d`, `rows ≥ J`.
    pub positional: Array2<S>,
}

impl<S: Scalar> EmbedParams<S> {
    pub fn zeros(kind: EmbedKind, m: usize, d: usize, rows: usize) -> Self {
        Self {
            kind,
            kernel: Array2::zeros((d, m)),
            bias: Array1::zeros(d),
            positional: Array2::zeros((rows, d)),
        }
    }

    pub fn init<R: Rng>(kind: EmbedKind, m: usize, d: usize, rows: usize, rng: &mut R) -> Self {
        let bound = (1.0 / m as f64).sqrt();
        let kernel = match kind {
            EmbedKind::Conv => uniform2(rng, d, m, bound),
            // Xavier-uniform, as for a dense layer.
            EmbedKind::Linear => uniform2(rng, d, m, (6.0 / (m + d) as f64).sqrt()),
        };
        let bias = match kind {
            EmbedKind::Conv => uniform1(rng, d, bound),
            EmbedKind::Linear => Array1::zeros(d),
        };
        Self {
            kind,
            kernel,
            bias,
            positional: normal2(rng, rows, d, 0.02),
        }
    }

    pub fn window(&self) -> usize {
        self.kernel.ncols()
    }

    pub fn width(&self) -> usize {
        self.kernel.nrows()
    }
}

impl<S: Scalar> ParamGroup<S> for EmbedParams<S> {
    fn tensors(&self) -> Vec<(String, &[S])> {
        let mut v = vec![("embed.kernel".to_string(), slice2(&self.kernel))];
        if self.kind == EmbedKind::Conv {
            v.push(("embed.bias".to_string(), slice1(&self.bias)));
        }
        v.push(("embed.positional".to_string(), slice2(&self.positional)));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        let conv = self.kind == EmbedKind::Conv;
        let mut v = vec![("embed.kernel".to_string(), slice2_mut(&mut self.kernel))];
        if conv {
            v.push(("embed.bias".to_string(), slice1_mut(&mut self.bias)));
        }
        v.push(("embed.positional".to_string(), slice2_mut(&mut self.positional)));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeEmbeddings<S> {
    /// `J × d`.
    pub matrix: Array2<S>,
    pub shape_starts: Vec<usize>,
}

impl<S> ShapeEmbeddings<S> {
    pub fn shape_count(&self) -> usize {
        self.shape_starts.len()
    }
}

fn check_params<S: Scalar>(params: &EmbedParams<S>, cfg: &ShapeConfig) -> Result<()> {
    if params.window() != cfg.m {
        return Err(Error::Dimension(format!(
            "kernel length {} does not match window {}",
            params.window(),
            cfg.m
        )));
    }
    if params.width() != cfg.d || params.bias.len() != cfg.d || params.positional.ncols() != cfg.d {
        return Err(Error::Dimension(format!("embedding width is not {}", cfg.d)));
    }
    if params.positional.nrows() < cfg.shape_count() {
        return Err(Error::Dimension(format!(
            "positional table has {} rows, need {}",
            params.positional.nrows(),
            cfg.shape_count()
        )));
    }
    Ok(())
}

/// Stacks every window of every series: `(B·J) × m`.
pub(crate) fn unfold<S: Scalar>(batch: &[&[S]], cfg: &ShapeConfig) -> Array2<S> {
    let j = cfg.shape_count();
    let mut out = Array2::zeros((batch.len() * j, cfg.m));
    for (b, series) in batch.iter().enumerate() {
        for p in 0..j {
            let start = p * cfg.q;
            out.row_mut(b * j + p)
                .assign(&ndarray::ArrayView1::from(&series[start..start + cfg.m]));
        }
    }
    out
}

/// Batched forward over unfolded windows; returns `(B·J) × d`.
pub(crate) fn embed_forward<S: Scalar>(windows: &Array2<S>, params: &EmbedParams<S>, j: usize) -> Array2<S> {
    let mut out = windows.dot(&params.kernel.t());
    if params.kind == EmbedKind::Conv {
        out += &params.bias;
    }
    let pos = params.positional.slice(s![..j, ..]);
    for mut chunk in out.axis_chunks_iter_mut(Axis(0), j) {
        chunk += &pos;
    }
    out
}

/// Accumulates parameter gradients; returns the window gradients.
pub(crate) fn embed_backward<S: Scalar>(
    windows: &Array2<S>,
    grad_out: ArrayView2<S>,
    params: &EmbedParams<S>,
    grads: &mut EmbedParams<S>,
    j: usize,
) -> Array2<S> {
    grads.kernel += &grad_out.t().dot(windows);
    if params.kind == EmbedKind::Conv {
        grads.bias += &grad_out.sum_axis(Axis(0));
    }
    let mut pos = grads.positional.slice_mut(s![..j, ..]);
    for chunk in grad_out.axis_chunks_iter(Axis(0), j) {
        pos += &chunk;
    }
    grad_out.dot(&params.kernel)
}

/// Embeds a single series.
pub fn embed_shapes<S: Scalar>(
    series: &[S],
    params: &EmbedParams<S>,
    cfg: &ShapeConfig,
) -> Result<ShapeEmbeddings<S>> {
    check_params(params, cfg)?;
    if series.len() != cfg.series_len {
        return Err(Error::Dimension(format!(
            "series length {} does not match {}",
            series.len(),
            cfg.series_len
        )));
    }
    let windows = unfold(&[series], cfg);
    Ok(ShapeEmbeddings {
        matrix: embed_forward(&windows, params, cfg.shape_count()),
        shape_starts: cfg.shape_starts(),
    })
}

/// Gradients of a scalar loss through [`embed_shapes`], given the loss
/// gradient with respect to the output matrix. Returns the parameter and
/// series gradients.
pub fn embed_shapes_backward<S: Scalar>(
    series: &[S],
    params: &EmbedParams<S>,
    cfg: &ShapeConfig,
    grad_out: ArrayView2<S>,
) -> Result<(EmbedParams<S>, Vec<S>)> {
    check_params(params, cfg)?;
    let j = cfg.shape_count();
    if grad_out.dim() != (j, cfg.d) {
        return Err(Error::Dimension(format!("output gradient must be {j}×{}", cfg.d)));
    }
    let windows = unfold(&[series], cfg);
    let mut grads = EmbedParams::zeros(params.kind, cfg.m, cfg.d, params.positional.nrows());
    let dwin = embed_backward(&windows, grad_out, params, &mut grads, j);
    let mut dseries = vec![S::zero(); series.len()];
    for p in 0..j {
        for (t, &g) in dwin.row(p).iter().enumerate() {
            dseries[p * cfg.q + t] += g;
        }
    }
    Ok((grads, dseries))
}
