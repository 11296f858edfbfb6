//! Scalar abstraction: all core math is generic over `Real` (f32 or f64).

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point scalar usable throughout the numeric core.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    fn pi() -> Self {
        Self::from_f64_lossy(std::f64::consts::PI)
    }

    fn two() -> Self {
        Self::one() + Self::one()
    }

    fn half() -> Self {
        Self::from_f64_lossy(0.5)
    }
}

impl Real for f32 {}
impl Real for f64 {}
