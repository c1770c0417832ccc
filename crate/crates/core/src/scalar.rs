use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point type usable for embeddings and similarity scores.
///
/// Implemented for `f32` and `f64`. The deterministic embedding provider
/// always computes in `f64` and casts down, so `f64` results are bit-exact
/// across platforms while `f32` is available for memory-bound indexes.
pub trait Scalar: Float + Sum + Debug + Display + Default + Send + Sync + 'static {
    fn of(value: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_usize(value: usize) -> Self {
        Self::of(value as f64)
    }
}

impl Scalar for f32 {
    fn of(value: f64) -> Self {
        value as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(value: f64) -> Self {
        value
    }

    fn as_f64(self) -> f64 {
        self
    }
}
