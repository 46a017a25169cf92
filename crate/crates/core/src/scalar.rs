//! Floating-point scalars the runtime and trainer are generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::tensorstore::DType;

/// Compute scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Storage dtype with the same width.
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Lift an `f32` value exactly.
    fn from_f32_exact(v: f32) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32_exact(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32_exact(v: f32) -> Self {
        v as f64
    }
}

/// Shorthand for literal constants in generic code.
#[inline]
pub(crate) fn lit<S: Scalar>(v: f64) -> S {
    S::from_f64_lossy(v)
}
