//! Scalar abstraction shared by every layer.
//!
//! All numerical code is generic over [`Scalar`], implemented for `f32`
//! (training) and `f64` (gradient checking).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    /// Converts an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Exact (erf-based) GeLU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    half * x * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let cdf = S::lit(0.5) * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * S::lit(0.5)).exp() * S::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable softmax over a slice, written into `out`.
pub fn softmax_into<S: Scalar>(logits: &[S], out: &mut [S]) {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    softmax_into(logits, &mut out);
    out
}
