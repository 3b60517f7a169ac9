//! Scalar abstraction for the tensor engine.
//!
//! The engine is generic over the floating-point type so the same kernels
//! serve f32 and f64. Training and verification run in f64: the gradient
//! check tolerances assume 64-bit arithmetic.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point scalar usable inside tensors and tapes.
pub trait Scalar: Float + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
