//! Soft sparsification: scale the top-η shapes by their scores and fuse
//! the rest into a single trailing shape.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `max(1, ⌊η·J⌋)`.
pub fn keep_count(j: usize, eta: f64) -> usize {
    // The small offset keeps products like 0.3·10 from flooring to 2.
    let k = (eta * j as f64 + 1e-9).floor() as usize;
    k.clamp(1, j.max(1))
}

/// Rows a single sparsification produces from `j` inputs.
pub fn output_count(j: usize, eta: f64, fuse: bool) -> usize {
    let k = keep_count(j, eta);
    k + usize::from(fuse && k < j)
}

/// Which input rows survive one sparsification step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Ascending.
    pub kept: Vec<usize>,
    /// Ascending.
    pub dropped: Vec<usize>,
    /// Whether the dropped rows are fused into a trailing row.
    pub fused: bool,
}

impl Selection {
    /// Keeps everything (warm-up or η = 1).
    pub fn keep_all(j: usize) -> Self {
        Self {
            kept: (0..j).collect(),
            dropped: Vec::new(),
            fused: false,
        }
    }

    pub fn top_eta<S: Scalar>(scores: &[S], eta: f64, fuse: bool) -> Self {
        let (kept, dropped) = select_top_eta(scores, eta);
        let fused = fuse && !dropped.is_empty();
        Self { kept, dropped, fused }
    }

    pub fn output_rows(&self) -> usize {
        self.kept.len() + usize::from(self.fused)
    }
}

/// Indices of the `max(1, ⌊η·J⌋)` largest scores and the complement, both
/// ascending. Equal scores prefer the smaller index.
pub fn select_top_eta<S: Scalar>(scores: &[S], eta: f64) -> (Vec<usize>, Vec<usize>) {
    let j = scores.len();
    if j == 0 {
        return (Vec::new(), Vec::new());
    }
    let k = keep_count(j, eta);
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = order[..k].to_vec();
    let mut dropped = order[k..].to_vec();
    kept.sort_unstable();
    dropped.sort_unstable();
    (kept, dropped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsifiedShapes<S> {
    /// `Num × d`: kept rows in temporal order, then the fused row if any.
    pub matrix: Array2<S>,
    /// Input row index of each kept row.
    pub kept_indices: Vec<usize>,
    pub has_fused: bool,
    pub eta: f64,
}

impl<S> SparsifiedShapes<S> {
    pub fn num_shapes(&self) -> usize {
        self.kept_indices.len() + usize::from(self.has_fused)
    }
}

fn validate<S: Scalar>(embeddings: &ArrayView2<S>, scores: &[S], eta: f64) -> Result<()> {
    if scores.len() != embeddings.nrows() {
        return Err(Error::Dimension(format!(
            "{} scores for {} shapes",
            scores.len(),
            embeddings.nrows()
        )));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Config(format!("keep fraction {eta} outside (0, 1]")));
    }
    Ok(())
}

/// Soft sparsification with fusion of the dropped shapes.
pub fn sparsify<S: Scalar>(embeddings: ArrayView2<S>, scores: &[S], eta: f64) -> Result<SparsifiedShapes<S>> {
    sparsify_with(embeddings, scores, eta, true)
}

/// As [`sparsify`]; with `fuse = false` the dropped shapes are discarded.
pub fn sparsify_with<S: Scalar>(
    embeddings: ArrayView2<S>,
    scores: &[S],
    eta: f64,
    fuse: bool,
) -> Result<SparsifiedShapes<S>> {
    validate(&embeddings, scores, eta)?;
    let sel = Selection::top_eta(scores, eta, fuse);
    let matrix = apply_selection(embeddings, ArrayView1::from(scores), &sel);
    Ok(SparsifiedShapes {
        matrix,
        kept_indices: sel.kept,
        has_fused: sel.fused,
        eta,
    })
}

pub(crate) fn apply_selection<S: Scalar>(rows: ArrayView2<S>, scores: ArrayView1<S>, sel: &Selection) -> Array2<S> {
    let d = rows.ncols();
    let mut out = Array2::zeros((sel.output_rows(), d));
    for (o, &j) in sel.kept.iter().enumerate() {
        let a = scores[j];
        for (v, &x) in out.row_mut(o).iter_mut().zip(rows.row(j)) {
            *v = a * x;
        }
    }
    if sel.fused {
        let mut fused = out.row_mut(sel.kept.len());
        for &p in &sel.dropped {
            let a = scores[p];
            for (v, &x) in fused.iter_mut().zip(rows.row(p)) {
                *v += a * x;
            }
        }
    }
    out
}

/// Returns `(d rows, d scores)`.
pub(crate) fn apply_selection_backward<S: Scalar>(
    rows: ArrayView2<S>,
    scores: ArrayView1<S>,
    sel: &Selection,
    grad_out: ArrayView2<S>,
) -> (Array2<S>, Array1<S>) {
    let mut drows = Array2::zeros(rows.raw_dim());
    let mut dscores = Array1::zeros(scores.len());
    let mut route = |src: usize, out_row: usize| {
        let g = grad_out.row(out_row);
        let a = scores[src];
        let mut acc = S::zero();
        for ((dr, &gv), &x) in drows.row_mut(src).iter_mut().zip(g).zip(rows.row(src)) {
            *dr = a * gv;
            acc += gv * x;
        }
        dscores[src] = acc;
    };
    for (o, &j) in sel.kept.iter().enumerate() {
        route(j, o);
    }
    if sel.fused {
        for &p in &sel.dropped {
            route(p, sel.kept.len());
        }
    }
    (drows, dscores)
}
