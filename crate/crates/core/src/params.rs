//! Named parameter tensors and initializers.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;

/// A group of trainable tensors exposed as flat named slices.
///
/// Gradients and optimizer moments reuse the owning type, so two instances
/// built from the same configuration always yield tensors in the same order
/// with the same lengths.
pub trait ParamGroup<S: Scalar> {
    fn tensors(&self) -> Vec<(String, &[S])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [S])>;

    fn zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(S::zero());
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn slice1<S>(a: &Array1<S>) -> &[S] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice1_mut<S>(a: &mut Array1<S>) -> &mut [S] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn slice2<S>(a: &Array2<S>) -> &[S] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice2_mut<S>(a: &mut Array2<S>) -> &mut [S] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn uniform2<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<S> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || S::lit(dist.sample(rng)))
}

pub(crate) fn uniform1<S: Scalar, R: Rng>(rng: &mut R, len: usize, bound: f64) -> Array1<S> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array1::from_shape_simple_fn(len, || S::lit(dist.sample(rng)))
}

pub(crate) fn normal2<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || S::lit(dist.sample(rng)))
}
