//! Scalar abstraction shared by the numerical modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable by the model, solver and simulator.
///
/// Implemented for `f32` and `f64`. The tolerances quoted throughout the
/// crate assume `f64`; `f32` is supported for cheap exploratory runs.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("every f64 literal is representable")
    }

    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    a.iter().map(|&x| x * x).sum()
}
