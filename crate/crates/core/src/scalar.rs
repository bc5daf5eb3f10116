//! Arithmetic abstraction shared by plain evaluation, forward-mode
//! differentiation and interval enclosure.
//!
//! Every smooth function in [`crate::safety`] and the policy in
//! [`crate::certify`] is written once against [`Scalar`] and instantiated
//! with `f64`, [`crate::ad::Dual`] or [`crate::interval::Interval`].

use core::cmp::Ordering;
use core::fmt::Debug;
use core::ops::{Add, Div, Mul, Neg, Sub};

/// Exponent arguments are clamped to this magnitude before `exp`.
pub const EXP_CLAMP: f64 = 500.0;

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(value: f64) -> Self;

    fn exp(self) -> Self;

    /// `self * self`, tight for intervals straddling zero.
    fn sqr(self) -> Self;

    fn min(self, other: Self) -> Self;

    fn max(self, other: Self) -> Self;

    /// Ordering of the two values when it holds for every represented point.
    fn certain_cmp(&self, other: &Self) -> Option<Ordering>;

    /// Smallest value containing both operands. Exact types may return either.
    fn hull(self, other: Self) -> Self;

    /// A representative point value (the midpoint for intervals).
    fn center(&self) -> f64;

    fn clamp_exp_arg(self) -> Self {
        self.max(Self::cst(-EXP_CLAMP)).min(Self::cst(EXP_CLAMP))
    }

    /// `1 / (1 + e^{-z})` without argument clamping.
    fn logistic_raw(self) -> Self {
        Self::cst(1.0) / ((-self).exp() + 1.0)
    }

    /// Value and derivative `σ(z)(1 − σ(z))` of the logistic function.
    fn logistic_with_slope(self) -> (Self, Self) {
        let s = self.logistic_raw();
        (s, s * (-s + 1.0))
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(value: f64) -> Self {
        value
    }

    #[inline]
    fn exp(self) -> Self {
        libm::exp(self)
    }

    #[inline]
    fn sqr(self) -> Self {
        self * self
    }

    #[inline]
    fn min(self, other: Self) -> Self {
        f64::min(self, other)
    }

    #[inline]
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }

    #[inline]
    fn certain_cmp(&self, other: &Self) -> Option<Ordering> {
        self.partial_cmp(other)
    }

    #[inline]
    fn hull(self, _other: Self) -> Self {
        self
    }

    #[inline]
    fn center(&self) -> f64 {
        *self
    }
}

/// Logistic function `1 / (1 + e^{-z})` with the exponent argument clamped.
#[inline]
pub fn logistic<T: Scalar>(z: T) -> T {
    z.clamp_exp_arg().logistic_raw()
}
