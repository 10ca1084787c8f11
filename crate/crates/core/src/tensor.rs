//! Scalar abstraction so the numeric pipeline runs in either f32 or f64.
//!
//! The optimization loop uses f32 for speed; gradient checks run the same
//! code paths in f64 against central finite differences.

use ndarray::{ArrayD, NdFloat};
use num_traits::FromPrimitive;

pub trait Scalar: NdFloat + FromPrimitive {
    fn f32(self) -> f32 {
        self.f64_() as f32
    }
    fn f64_(self) -> f64;
}

impl Scalar for f32 {
    fn f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn f64_(self) -> f64 {
        self
    }
}

/// Shorthand conversion from f64 literals into the active scalar type.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 conversion")
}

/// True if every element is finite.
pub fn all_finite<T: Scalar>(a: &ArrayD<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}
