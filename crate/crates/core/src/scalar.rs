//! Scalar abstraction: every numeric module is generic over a float type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for all tensors in this crate.
///
/// The bound set is what the kernels actually use: `Float` for transcendental
/// ops, `NumAssign` for accumulation, the primitive conversions for seeding
/// and serialization, and `ScalarOperand` so `ndarray` broadcasting works.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Dtype tag written into checkpoints.
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Converts an `f64` literal into the working scalar type.
///
/// Panics only if the target type cannot represent any `f64`, which cannot
/// happen for the two implementors above.
#[inline]
pub fn s<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 -> Scalar conversion")
}

/// Converts a scalar back to `f64` for reporting and serialization.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("Scalar -> f64 conversion")
}
