//! Scalar abstraction so the whole stack runs in either `f32` or `f64`.
//!
//! Training uses `f32` (checkpoints store 32-bit payloads); gradient
//! verification against finite differences runs the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout tensors, nets and losses.
///
/// The bound set is the union of what `ndarray` needs for arithmetic and
/// matrix products and what the numeric code needs for literals and
/// transcendentals.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, panicking only for values outside the
    /// target type's range (never the case for the constants used here).
    fn of_f64(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("literal out of scalar range")
    }

    /// Widens to `f64` for reporting and serialization.
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar not representable as f64")
    }

    fn of_f32(v: f32) -> Self {
        <Self as num_traits::FromPrimitive>::from_f32(v).expect("literal out of scalar range")
    }

    fn as_f32(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).expect("scalar not representable as f32")
    }

    /// Converts a count into a scalar (used for means over N elements).
    fn of_usize(v: usize) -> Self {
        <Self as num_traits::FromPrimitive>::from_usize(v).expect("count out of scalar range")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for `T::of_f64` at call sites full of literals.
pub fn lit<T: Scalar>(v: f64) -> T {
    T::of_f64(v)
}
