//! Floating-point abstraction used across the DSP and autodiff code.
//!
//! Everything numerical in this crate is generic over [`Real`] so the same
//! code path can run in `f32` (training, extraction — fast) and `f64`
//! (gradient checking — accurate). The trait is a thin bundle of the standard
//! numeric traits plus the FFT library's sample trait; it adds no methods of
//! its own.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type for all signal, feature and gradient math.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + rustfft::FftNum
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for converting an `f64` literal into the active scalar type.
///
/// Panics only if the conversion is unrepresentable, which cannot happen for
/// the in-range constants this crate uses.
#[inline]
pub fn r<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in scalar type")
}

/// Converts the active scalar into `f64` (for reporting and file output).
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("scalar convertible to f64")
}
