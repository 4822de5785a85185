//! Scalar abstraction for the numerical core.
//!
//! Everything numeric in this crate is generic over [`Scalar`], which is any
//! IEEE float that ndarray can do linear algebra with. Concrete code should
//! use the [`crate::Real`] alias (f64); f32 exists mainly for experimentation.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64, used for literals and tolerances.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Lossless-enough conversion back to f64 for reporting and serialization.
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}
