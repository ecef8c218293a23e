//! Scalar abstraction shared by every kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of a [`Tensor`](crate::tensor::Tensor): `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Error function.
    fn erf(self) -> Self;

    /// Lossy conversion from `f64`; every finite `f64` maps to some value.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn of(x: f64) -> Self {
        x
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn of(x: f64) -> Self {
        x as f32
    }
}
