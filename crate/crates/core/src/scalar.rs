//! Scalar abstraction shared by the geometry and forward modules.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Real scalar usable by the dense linear algebra: `f32` or `f64`.
pub trait Real: RealField + Copy + ToPrimitive + Display + Debug + Send + Sync + 'static {}

impl<T> Real for T where T: RealField + Copy + ToPrimitive + Display + Debug + Send + Sync + 'static {}

/// Converts an `f64` constant into `T`.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Converts `T` back to `f64` (lossless for `f32` and `f64`).
#[inline]
pub fn f<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Machine epsilon of `T`.
#[inline]
pub fn eps<T: Real>() -> T {
    T::default_epsilon()
}
