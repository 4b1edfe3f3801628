//! Tensor layout conventions and the scalar trait shared by all kernels.
//!
//! Activations are dense NCHW arrays: `(batch, channels, rows, cols)`.
//! Training runs at `f32`; every verification oracle runs the same generic
//! kernels at `f64`.

use ndarray::{Array4, LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Element type usable by every kernel. Implemented for `f32` (training
/// precision) and `f64` (verification precision).
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
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

/// NCHW activation tensor.
pub type Tensor<A> = Array4<A>;

/// True iff every element is finite. Kernel outputs must satisfy this;
/// a NaN or infinity coming out of a kernel is a kernel bug.
pub fn all_finite<A: Scalar>(t: &Array4<A>) -> bool {
    t.iter().all(|v| v.is_finite())
}

pub fn all_finite_slice<A: Scalar>(data: &[A]) -> bool {
    data.iter().all(|v| v.is_finite())
}

/// Convert an NCHW tensor between precisions (used only by verification code).
pub fn cast<A: Scalar, B: Scalar>(t: &Array4<A>) -> Array4<B> {
    t.mapv(|v| B::from_f64(v.to_f64()))
}
