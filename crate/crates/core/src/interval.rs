//! Closed intervals with outward rounding, and axis-aligned boxes over the
//! lumped state.
//!
//! Every arithmetic result is widened by one ulp per endpoint (`next_down` /
//! `next_up`), which makes the enclosure valid regardless of the rounding
//! mode of the underlying operation. `exp` goes through `libm` and is widened
//! by a few ulps to absorb its own error.

use core::cmp::Ordering;
use core::fmt;
use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::scalar::Scalar;

#[derive(Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl fmt::Debug for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:e}, {:e}]", self.lo, self.hi)
    }
}

#[inline]
fn down(x: f64) -> f64 {
    x.next_down()
}

#[inline]
fn up(x: f64) -> f64 {
    x.next_up()
}

impl Interval {
    pub const ENTIRE: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    /// Panics if `lo > hi` or either bound is NaN.
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "invalid interval [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        let m = 0.5 * self.lo + 0.5 * self.hi;
        m.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    /// Halves at the midpoint.
    pub fn bisect(&self) -> (Interval, Interval) {
        let m = self.mid();
        (Interval::new(self.lo, m), Interval::new(m, self.hi))
    }

    /// Intersection, or `None` when disjoint.
    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    /// Magnitude bound `max(|lo|, |hi|)`.
    pub fn mag(&self) -> f64 {
        libm::fabs(self.lo).max(libm::fabs(self.hi))
    }
}

impl Add for Interval {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Self {
            lo: down(self.lo + rhs.lo),
            hi: up(self.hi + rhs.hi),
        }
    }
}

impl Sub for Interval {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Self {
            lo: down(self.lo - rhs.hi),
            hi: up(self.hi - rhs.lo),
        }
    }
}

#[inline]
fn mul_bounds(a: Interval, b: Interval) -> (f64, f64) {
    let p = [a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in p {
        // 0 * inf only arises from unbounded operands; treat as unbounded.
        if v.is_nan() {
            return (f64::NEG_INFINITY, f64::INFINITY);
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

impl Mul for Interval {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let (lo, hi) = mul_bounds(self, rhs);
        Self {
            lo: down(lo),
            hi: up(hi),
        }
    }
}

impl Div for Interval {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        if rhs.lo <= 0.0 && rhs.hi >= 0.0 {
            return Self::ENTIRE;
        }
        let inv = Interval {
            lo: down(1.0 / rhs.hi),
            hi: up(1.0 / rhs.lo),
        };
        self * inv
    }
}

impl Neg for Interval {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self {
            lo: -self.hi,
            hi: -self.lo,
        }
    }
}

impl Add<f64> for Interval {
    type Output = Self;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        self + Interval::point(rhs)
    }
}

impl Sub<f64> for Interval {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        self - Interval::point(rhs)
    }
}

impl Mul<f64> for Interval {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        let (a, b) = (self.lo * rhs, self.hi * rhs);
        if a.is_nan() || b.is_nan() {
            return Self::ENTIRE;
        }
        Self {
            lo: down(a.min(b)),
            hi: up(a.max(b)),
        }
    }
}

impl Div<f64> for Interval {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self / Interval::point(rhs)
    }
}

impl Scalar for Interval {
    fn cst(value: f64) -> Self {
        Interval::point(value)
    }

    fn exp(self) -> Self {
        let lo = libm::exp(self.lo);
        let hi = if self.is_point() { lo } else { libm::exp(self.hi) };
        Self {
            lo: (lo * (1.0 - 4.0 * f64::EPSILON)).max(0.0),
            hi: if hi.is_finite() {
                up(hi * (1.0 + 4.0 * f64::EPSILON))
            } else {
                f64::INFINITY
            },
        }
    }

    fn sqr(self) -> Self {
        if self.lo >= 0.0 {
            Self {
                lo: down(self.lo * self.lo).max(0.0),
                hi: up(self.hi * self.hi),
            }
        } else if self.hi <= 0.0 {
            Self {
                lo: down(self.hi * self.hi).max(0.0),
                hi: up(self.lo * self.lo),
            }
        } else {
            Self {
                lo: 0.0,
                hi: up(self.mag() * self.mag()),
            }
        }
    }

    fn min(self, other: Self) -> Self {
        Self {
            lo: self.lo.min(other.lo),
            hi: self.hi.min(other.hi),
        }
    }

    fn max(self, other: Self) -> Self {
        Self {
            lo: self.lo.max(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    fn certain_cmp(&self, other: &Self) -> Option<Ordering> {
        if self.hi < other.lo {
            Some(Ordering::Less)
        } else if self.lo > other.hi {
            Some(Ordering::Greater)
        } else if self.is_point() && other.is_point() && self.lo == other.lo {
            Some(Ordering::Equal)
        } else {
            None
        }
    }

    fn hull(self, other: Self) -> Self {
        Self {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    fn center(&self) -> f64 {
        self.mid()
    }

    // Monotone, and the slope is unimodal with its peak 1/4 at zero, so
    // the two endpoints and the peak suffice.
    fn logistic_with_slope(self) -> (Self, Self) {
        let at = |z: f64| {
            let s = Interval::point(z).logistic_raw();
            (s, s * (-s + 1.0))
        };
        let (va, sa) = at(self.lo);
        let (vb, sb) = if self.is_point() { (va, sa) } else { at(self.hi) };
        let mut slope = sa.hull(sb);
        if self.lo < 0.0 && self.hi > 0.0 {
            slope.hi = 0.25;
        }
        slope.lo = slope.lo.max(0.0);
        slope.hi = slope.hi.min(0.25);
        (Interval { lo: va.lo, hi: vb.hi }, slope)
    }
}

/// Axis-aligned box over `(s1, v1, s2, v2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StateBox {
    pub dims: [Interval; 4],
}

impl StateBox {
    pub fn new(s1: Interval, v1: Interval, s2: Interval, v2: Interval) -> Self {
        Self { dims: [s1, v1, s2, v2] }
    }

    /// Box with both positions in `positions` and both velocities in `velocities`.
    pub fn symmetric(positions: Interval, velocities: Interval) -> Self {
        Self::new(positions, velocities, positions, velocities)
    }

    pub fn point(x: [f64; 4]) -> Self {
        Self {
            dims: x.map(Interval::point),
        }
    }

    pub fn mid(&self) -> [f64; 4] {
        self.dims.map(|d| d.mid())
    }

    pub fn contains(&self, x: &[f64; 4]) -> bool {
        self.dims.iter().zip(x).all(|(d, v)| d.contains(*v))
    }

    pub fn is_point(&self) -> bool {
        self.dims.iter().all(Interval::is_point)
    }

    /// Index of the widest dimension after multiplying each width by `scale`.
    pub fn widest(&self, scale: &[f64; 4]) -> usize {
        let mut best = 0;
        let mut w = f64::NEG_INFINITY;
        for (i, (d, s)) in self.dims.iter().zip(scale).enumerate() {
            let sw = d.width() * s;
            if sw > w {
                w = sw;
                best = i;
            }
        }
        best
    }

    pub fn split(&self, dim: usize) -> (StateBox, StateBox) {
        let (a, b) = self.dims[dim].bisect();
        let mut left = *self;
        let mut right = *self;
        left.dims[dim] = a;
        right.dims[dim] = b;
        (left, right)
    }

    /// Clamps a point into the box.
    pub fn clamp(&self, x: [f64; 4]) -> [f64; 4] {
        let mut out = x;
        for (o, d) in out.iter_mut().zip(&self.dims) {
            *o = o.clamp(d.lo, d.hi);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_encloses_point_results() {
        let a = Interval::new(-1.5, 2.0);
        let b = Interval::new(0.25, 3.0);
        for &x in &[-1.5, 0.0, 1.0, 2.0] {
            for &y in &[0.25, 1.0, 3.0] {
                assert!((a + b).contains(x + y));
                assert!((a - b).contains(x - y));
                assert!((a * b).contains(x * y));
                assert!((a / b).contains(x / y));
            }
        }
    }

    #[test]
    fn sqr_is_tight_across_zero() {
        let s = Interval::new(-2.0, 1.0).sqr();
        assert_eq!(s.lo, 0.0);
        assert!(s.hi >= 4.0 && s.hi < 4.0 + 1e-12);
        let naive = Interval::new(-2.0, 1.0) * Interval::new(-2.0, 1.0);
        assert!(naive.lo < 0.0);
    }

    #[test]
    fn division_by_zero_straddle_is_entire() {
        let q = Interval::new(1.0, 2.0) / Interval::new(-1.0, 1.0);
        assert_eq!(q, Interval::ENTIRE);
    }

    #[test]
    fn exp_brackets_libm() {
        let e = Interval::new(-3.0, 2.0).exp();
        assert!(e.lo <= libm::exp(-3.0) && e.hi >= libm::exp(2.0));
        assert!(e.lo > 0.0);
    }

    #[test]
    fn widest_respects_scale() {
        let b = StateBox::new(
            Interval::new(0.0, 4.0),
            Interval::new(0.0, 1.0),
            Interval::new(0.0, 2.0),
            Interval::new(0.0, 0.1),
        );
        assert_eq!(b.widest(&[1.0, 1.0, 1.0, 1.0]), 0);
        assert_eq!(b.widest(&[1.0, 10.0, 1.0, 10.0]), 1);
    }
}
