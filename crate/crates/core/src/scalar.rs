use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar the toolkit is generic over: `f32` or `f64`.
///
/// Losses and oracles run in `f64`; the student network trains in `f32` and
/// is gradient-checked in `f64`.
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
    /// Tolerance for a row of a log-domain grid to count as normalized.
    const NORM_TOLERANCE: f64;

    fn from_f64_lossy(value: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn from_usize_lossy(value: usize) -> Self {
        Self::from_f64_lossy(value as f64)
    }
}

impl Scalar for f32 {
    const NORM_TOLERANCE: f64 = 1e-5;

    #[inline]
    fn from_f64_lossy(value: f64) -> Self {
        value as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NORM_TOLERANCE: f64 = 1e-9;

    #[inline]
    fn from_f64_lossy(value: f64) -> Self {
        value
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
