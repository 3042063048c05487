//! Element types for tensors and geometry kernels.

use num_traits::Float;

/// Floating-point element type used throughout the crate.
///
/// Two implementations exist: `f32` (training precision) and `f64`
/// (verification precision — oracles and gradient checks). Generic code
/// converts literals through [`Scalar::from_f64`] so the same kernels
/// serve both.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
