use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar used by the latency models and the planner.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. All literals used by the crate are representable.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `a` beats `b` by more than a relative `1e-12` margin (scaled for `f32`).
pub(crate) fn clearly_greater<T: Scalar>(a: T, b: T) -> bool {
    a > b + tie_margin(a, b)
}

pub(crate) fn nearly_equal<T: Scalar>(a: T, b: T) -> bool {
    (a - b).abs() <= tie_margin(a, b)
}

fn tie_margin<T: Scalar>(a: T, b: T) -> T {
    let rel = if std::mem::size_of::<T>() <= 4 {
        T::lit(1e-6)
    } else {
        T::lit(1e-12)
    };
    rel * a.abs().max(b.abs())
}
