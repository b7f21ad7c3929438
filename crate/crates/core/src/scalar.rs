//! Floating-point abstraction shared by every solver in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Real scalar the simulation and regression code is generic over.
///
/// Implemented for `f32` and `f64`. Random draws are produced in `f64` and
/// narrowed through [`Scalar::lit`].
pub trait Scalar: Float + FloatConst + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static {
    /// Converts an `f64` literal or draw into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count is representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Closed interval of admissible control values. Either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<S> {
    pub lo: S,
    pub hi: S,
}

impl<S: Scalar> Interval<S> {
    pub fn new(lo: S, hi: S) -> Self {
        Self { lo, hi }
    }

    pub fn real_line() -> Self {
        Self {
            lo: S::neg_infinity(),
            hi: S::infinity(),
        }
    }

    pub fn contains(&self, v: S) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: S) -> S {
        v.max(self.lo).min(self.hi)
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    /// `n` equispaced points from `lo` to `hi`, endpoints included.
    pub fn grid(&self, n: usize) -> Vec<S> {
        if n == 1 {
            return vec![(self.lo + self.hi) / S::lit(2.0)];
        }
        let step = (self.hi - self.lo) / S::from_count(n - 1);
        (0..n).map(|i| self.lo + step * S::from_count(i)).collect()
    }
}
