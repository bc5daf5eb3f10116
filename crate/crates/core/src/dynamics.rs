//! Exact zero-order-hold discretization of two decoupled double integrators.

use core::ops::{Add, Mul};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Path position `s` [m] and velocity `v` [m/s] of one agent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AgentState {
    pub s: f64,
    pub v: f64,
}

/// Both agents stacked in the canonical order `(s1, v1, s2, v2)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LumpedState {
    pub agent1: AgentState,
    pub agent2: AgentState,
}

impl LumpedState {
    pub const DIM: usize = 4;

    pub fn new(s1: f64, v1: f64, s2: f64, v2: f64) -> Self {
        Self {
            agent1: AgentState { s: s1, v: v1 },
            agent2: AgentState { s: s2, v: v2 },
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.agent1.s, self.agent1.v, self.agent2.s, self.agent2.v]
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        Self::new(x[0], x[1], x[2], x[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Distance `|s1 - s2|` projected onto a single path.
    pub fn distance(&self) -> f64 {
        libm::fabs(self.agent1.s - self.agent2.s)
    }
}

impl Add for LumpedState {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let (a, b) = (self.to_array(), rhs.to_array());
        Self::from_array(core::array::from_fn(|i| a[i] + b[i]))
    }
}

impl Mul<f64> for LumpedState {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self::from_array(self.to_array().map(|v| v * rhs))
    }
}

/// Accelerations `(a1, a2)` [m/s²].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControlInput {
    pub a1: f64,
    pub a2: f64,
}

impl ControlInput {
    pub const DIM: usize = 2;

    pub fn new(a1: f64, a2: f64) -> Self {
        Self { a1, a2 }
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.a1, self.a2]
    }

    pub fn from_array(u: [f64; 2]) -> Self {
        Self::new(u[0], u[1])
    }

    pub fn inf_norm(&self) -> f64 {
        libm::fabs(self.a1).max(libm::fabs(self.a2))
    }
}

/// Per-agent transition `x+ = A x + B a` with `A = [[1, Ts], [0, 1]]` and
/// `B = [Ts²/2, Ts]`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiscreteDynamics {
    pub ts: f64,
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

/// Closed-form ZOH discretization of `s' = v, v' = a`.
pub fn zoh_discretize(ts: f64) -> Result<DiscreteDynamics> {
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(Error::InvalidParameter("sample time must be positive and finite"));
    }
    Ok(DiscreteDynamics {
        ts,
        a: [[1.0, ts], [0.0, 1.0]],
        b: [ts * ts / 2.0, ts],
    })
}

impl DiscreteDynamics {
    pub fn new(ts: f64) -> Result<Self> {
        zoh_discretize(ts)
    }

    #[inline]
    pub fn agent_step<T: Scalar>(&self, s: T, v: T, a: T) -> (T, T) {
        // A is unit upper triangular by construction; skip the zero products.
        (s + v * self.a[0][1] + a * self.b[0], v + a * self.b[1])
    }

    /// Lumped update on raw arrays, generic over the arithmetic.
    #[inline]
    pub fn step_array<T: Scalar>(&self, x: &[T; 4], u: &[T; 2]) -> [T; 4] {
        let (s1, v1) = self.agent_step(x[0], x[1], u[0]);
        let (s2, v2) = self.agent_step(x[2], x[3], u[1]);
        [s1, v1, s2, v2]
    }

    pub fn step(&self, x: &LumpedState, u: &ControlInput) -> LumpedState {
        LumpedState::from_array(self.step_array(&x.to_array(), &u.to_array()))
    }
}

/// `x_{k+1} = f(x_k, u_k)`.
pub fn step(x: &LumpedState, u: &ControlInput, dynamics: &DiscreteDynamics) -> LumpedState {
    dynamics.step(x, u)
}
