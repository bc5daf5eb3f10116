//! Forward-mode dual numbers.
//!
//! `Dual<T, N>` carries a value and `N` partial derivatives over any base
//! [`Scalar`]. With `T = f64` it yields exact gradients; with
//! `T = Interval` it yields interval enclosures of the gradient over a box,
//! which the verifier uses for mean-value bounds.

use core::cmp::Ordering;
use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T, const N: usize> {
    pub value: T,
    pub partials: [T; N],
}

impl<T: Scalar, const N: usize> Dual<T, N> {
    pub fn constant(value: T) -> Self {
        Self {
            value,
            partials: [T::cst(0.0); N],
        }
    }

    /// Independent variable number `index` with unit seed.
    pub fn variable(value: T, index: usize) -> Self {
        let mut d = Self::constant(value);
        d.partials[index] = T::cst(1.0);
        d
    }

    /// Seeds every component of `x` as its own independent variable.
    pub fn seed(x: [T; N]) -> [Self; N] {
        let mut out = [Self::constant(T::cst(0.0)); N];
        for (i, (o, v)) in out.iter_mut().zip(x).enumerate() {
            *o = Self::variable(v, i);
        }
        out
    }

    #[inline]
    fn map_partials(self, f: impl Fn(T) -> T) -> [T; N] {
        let mut p = self.partials;
        for v in p.iter_mut() {
            *v = f(*v);
        }
        p
    }

    #[inline]
    fn zip_partials(self, other: Self, f: impl Fn(T, T) -> T) -> [T; N] {
        let mut p = self.partials;
        for (v, w) in p.iter_mut().zip(other.partials) {
            *v = f(*v, w);
        }
        p
    }
}

impl<T: Scalar, const N: usize> Add for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Self {
            value: self.value + rhs.value,
            partials: self.zip_partials(rhs, |a, b| a + b),
        }
    }
}

impl<T: Scalar, const N: usize> Sub for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Self {
            value: self.value - rhs.value,
            partials: self.zip_partials(rhs, |a, b| a - b),
        }
    }
}

impl<T: Scalar, const N: usize> Mul for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self.value, rhs.value);
        Self {
            value: a * b,
            partials: self.zip_partials(rhs, |da, db| da * b + a * db),
        }
    }
}

impl<T: Scalar, const N: usize> Div for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        let b = rhs.value;
        Self {
            value: q,
            partials: self.zip_partials(rhs, |da, db| (da - q * db) / b),
        }
    }
}

impl<T: Scalar, const N: usize> Neg for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self {
            value: -self.value,
            partials: self.map_partials(|d| -d),
        }
    }
}

impl<T: Scalar, const N: usize> Add<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        Self {
            value: self.value + rhs,
            partials: self.partials,
        }
    }
}

impl<T: Scalar, const N: usize> Sub<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        Self {
            value: self.value - rhs,
            partials: self.partials,
        }
    }
}

impl<T: Scalar, const N: usize> Mul<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        Self {
            value: self.value * rhs,
            partials: self.map_partials(|d| d * rhs),
        }
    }
}

impl<T: Scalar, const N: usize> Div<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        Self {
            value: self.value / rhs,
            partials: self.map_partials(|d| d / rhs),
        }
    }
}

impl<T: Scalar, const N: usize> Scalar for Dual<T, N> {
    fn cst(value: f64) -> Self {
        Self::constant(T::cst(value))
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        Self {
            value: e,
            partials: self.map_partials(|d| d * e),
        }
    }

    fn sqr(self) -> Self {
        let v = self.value;
        Self {
            value: v.sqr(),
            partials: self.map_partials(|d| d * v * 2.0),
        }
    }

    fn min(self, other: Self) -> Self {
        match self.value.certain_cmp(&other.value) {
            Some(Ordering::Less | Ordering::Equal) => self,
            Some(Ordering::Greater) => other,
            // Undecided: the generalized gradient lies in the hull.
            None => Self {
                value: self.value.min(other.value),
                partials: self.zip_partials(other, |a, b| a.hull(b)),
            },
        }
    }

    fn max(self, other: Self) -> Self {
        match self.value.certain_cmp(&other.value) {
            Some(Ordering::Greater | Ordering::Equal) => self,
            Some(Ordering::Less) => other,
            None => Self {
                value: self.value.max(other.value),
                partials: self.zip_partials(other, |a, b| a.hull(b)),
            },
        }
    }

    fn certain_cmp(&self, other: &Self) -> Option<Ordering> {
        self.value.certain_cmp(&other.value)
    }

    fn hull(self, other: Self) -> Self {
        Self {
            value: self.value.hull(other.value),
            partials: self.zip_partials(other, |a, b| a.hull(b)),
        }
    }

    fn center(&self) -> f64 {
        self.value.center()
    }

    fn logistic_raw(self) -> Self {
        let (value, slope) = self.value.logistic_with_slope();
        Self {
            value,
            partials: self.map_partials(|d| d * slope),
        }
    }
}

/// Value and gradient of `f` at `x`.
pub fn gradient<const N: usize>(f: impl Fn(&[Dual<f64, N>; N]) -> Dual<f64, N>, x: [f64; N]) -> (f64, [f64; N]) {
    let out = f(&Dual::seed(x));
    (out.value, out.partials)
}
