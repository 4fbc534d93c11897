//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Real scalar the tensor engine and detector are generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or configuration value.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Round-trip through the 32-bit checkpoint representation.
    fn as_f32(self) -> f32;

    fn from_f32(v: f32) -> Self;

    /// Short name used in run records (`"f32"` / `"f64"`).
    const NAME: &'static str;
}

impl Scalar for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    const NAME: &'static str = "f64";
}
