//! Gated attention head: `σ(w2 · tanh(W1 x + b1) + b2)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{slice1, slice1_mut, slice2, slice2_mut, uniform1, uniform2, ParamGroup};
use crate::scalar::{sigmoid, Scalar};

pub const DEFAULT_ATTN_WIDTH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead<S> {
    /// `d_attn × d`.
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    /// Output projection, length `d_attn`.
    pub w2: Array1<S>,
    /// Scalar output bias stored as a length-1 array.
    pub b2: Array1<S>,
}

impl<S: Scalar> AttentionHead<S> {
    pub fn zeros(d: usize, d_attn: usize) -> Self {
        Self {
            w1: Array2::zeros((d_attn, d)),
            b1: Array1::zeros(d_attn),
            w2: Array1::zeros(d_attn),
            b2: Array1::zeros(1),
        }
    }

    pub fn init<R: Rng>(d: usize, d_attn: usize, rng: &mut R) -> Self {
        let b_in = (1.0 / d as f64).sqrt();
        let b_out = (1.0 / d_attn as f64).sqrt();
        Self {
            w1: uniform2(rng, d_attn, d, b_in),
            b1: uniform1(rng, d_attn, b_in),
            w2: uniform1(rng, d_attn, b_out),
            b2: uniform1(rng, 1, b_out),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.nrows()
    }
}

impl<S: Scalar> ParamGroup<S> for AttentionHead<S> {
    fn tensors(&self) -> Vec<(String, &[S])> {
        vec![
            ("attention.w1".into(), slice2(&self.w1)),
            ("attention.b1".into(), slice1(&self.b1)),
            ("attention.w2".into(), slice1(&self.w2)),
            ("attention.b2".into(), slice1(&self.b2)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        vec![
            ("attention.w1".into(), slice2_mut(&mut self.w1)),
            ("attention.b1".into(), slice1_mut(&mut self.b1)),
            ("attention.w2".into(), slice1_mut(&mut self.w2)),
            ("attention.b2".into(), slice1_mut(&mut self.b2)),
        ]
    }
}

/// Score of one embedding.
pub fn attention_score<S: Scalar>(embedding: &[S], head: &AttentionHead<S>) -> Result<S> {
    if embedding.len() != head.input_width() {
        return Err(Error::Dimension(format!(
            "embedding width {} does not match attention head {}",
            embedding.len(),
            head.input_width()
        )));
    }
    let x = ArrayView1::from(embedding);
    let hidden = (head.w1.dot(&x) + &head.b1).mapv(S::tanh);
    Ok(sigmoid(hidden.dot(&head.w2) + head.b2[0]))
}

/// Cached activations of a batched score evaluation.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache<S> {
    pub hidden: Array2<S>,
    pub scores: Array1<S>,
}

/// Scores every row of `rows` independently.
pub(crate) fn score_rows<S: Scalar>(rows: ArrayView2<S>, head: &AttentionHead<S>) -> AttentionCache<S> {
    let mut hidden = rows.dot(&head.w1.t());
    hidden += &head.b1;
    hidden.mapv_inplace(S::tanh);
    let b2 = head.b2[0];
    let scores = hidden.dot(&head.w2).mapv(|z| sigmoid(z + b2));
    AttentionCache { hidden, scores }
}

/// Public batched scoring.
pub fn attention_scores<S: Scalar>(rows: ArrayView2<S>, head: &AttentionHead<S>) -> Result<Array1<S>> {
    if rows.ncols() != head.input_width() {
        return Err(Error::Dimension(format!(
            "embedding width {} does not match attention head {}",
            rows.ncols(),
            head.input_width()
        )));
    }
    Ok(score_rows(rows, head).scores)
}

/// Backpropagates score gradients; accumulates into `grads` and returns the
/// gradient with respect to `rows`.
pub(crate) fn score_rows_backward<S: Scalar>(
    rows: ArrayView2<S>,
    cache: &AttentionCache<S>,
    grad_scores: ArrayView1<S>,
    head: &AttentionHead<S>,
    grads: &mut AttentionHead<S>,
) -> Array2<S> {
    let dz: Array1<S> = cache
        .scores
        .iter()
        .zip(grad_scores)
        .map(|(&a, &g)| g * a * (S::one() - a))
        .collect();
    grads.w2 += &cache.hidden.t().dot(&dz);
    grads.b2[0] += dz.sum();
    // d(pre-tanh) = (dz ⊗ w2) ⊙ (1 − h²)
    let mut dpre = Array2::zeros(cache.hidden.raw_dim());
    for ((mut out, h), &g) in dpre.rows_mut().into_iter().zip(cache.hidden.rows()).zip(&dz) {
        for ((o, &hv), &w) in out.iter_mut().zip(h).zip(&head.w2) {
            *o = g * w * (S::one() - hv * hv);
        }
    }
    grads.w1 += &dpre.t().dot(&rows);
    grads.b1 += &dpre.sum_axis(Axis(0));
    dpre.dot(&head.w1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_scores_half() {
        let h = AttentionHead::<f64>::zeros(4, 8);
        assert_eq!(attention_score(&[1.0, -2.0, 3.0, 0.5], &h).unwrap(), 0.5);
    }

    #[test]
    fn saturated_bias() {
        let mut h = AttentionHead::<f64>::zeros(3, 8);
        h.b2[0] = 10.0;
        let s = attention_score(&[0.3, 0.2, 0.1], &h).unwrap();
        assert!((s - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch() {
        let h = AttentionHead::<f64>::zeros(3, 8);
        assert!(matches!(attention_score(&[0.0; 4], &h), Err(Error::Dimension(_))));
    }

    #[test]
    fn w1_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = AttentionHead::<f64>::init(5, 8, &mut rng);
        let x = [0.4, -1.2, 0.8, 0.05, -0.3];
        let rows = ArrayView2::from_shape((1, 5), &x).unwrap();
        let cache = score_rows(rows, &head);
        let mut grads = AttentionHead::zeros(5, 8);
        let dx = score_rows_backward(rows, &cache, ArrayView1::from(&[1.0]), &head, &mut grads);
        let h = 1e-6;
        for idx in 0..head.w1.len() {
            let mut p = head.clone();
            let mut m = head.clone();
            p.w1.as_slice_mut().unwrap()[idx] += h;
            m.w1.as_slice_mut().unwrap()[idx] -= h;
            let fd = (attention_score(&x, &p).unwrap() - attention_score(&x, &m).unwrap()) / (2.0 * h);
            let an = grads.w1.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-4), "{fd} vs {an}");
        }
        for i in 0..5 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (attention_score(&xp, &head).unwrap() - attention_score(&xm, &head).unwrap()) / (2.0 * h);
            assert!((fd - dx[[0, i]]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn scores_open_unit_interval_and_batch_matches_single(
            seed in any::<u64>(),
            vals in proptest::collection::vec(-5.0f64..5.0, 4 * 6),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = AttentionHead::<f64>::init(4, 8, &mut rng);
            let rows = Array2::from_shape_vec((6, 4), vals).unwrap();
            let batch = attention_scores(rows.view(), &head).unwrap();
            for (r, &s) in rows.rows().into_iter().zip(&batch) {
                prop_assert!(s > 0.0 && s < 1.0);
                let single = attention_score(r.as_slice().unwrap(), &head).unwrap();
                prop_assert!((single - s).abs() < 1e-14);
            }
        }
    }
}
