//! Smooth constraint functions of the lane-merging problem.
//!
//! All functions take the lumped state as `[T; 4] = (s1, v1, s2, v2)` and are
//! generic over [`Scalar`], so the same code yields values, exact gradients
//! (dual numbers) and interval enclosures.

use core::fmt;
use core::str::FromStr;

use crate::ad::Dual;
use crate::error::{Error, Result};
use crate::scalar::{logistic, Scalar};

const S1: usize = 0;
const V1: usize = 1;
const S2: usize = 2;
const V2: usize = 3;

/// Logistic activation `L_d(s1) = 1 / (1 + exp(-slope (s1 - offset)))`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActivationParams {
    /// Slope `m_d` [1/m], strictly positive.
    pub slope: f64,
    /// Offset `c_d` [m].
    pub offset: f64,
}

impl ActivationParams {
    pub const fn new(slope: f64, offset: f64) -> Self {
        Self { slope, offset }
    }

    /// Position at which the activation reaches `level` in (0, 1).
    pub fn position_at(&self, level: f64) -> f64 {
        self.offset + libm::log(level / (1.0 - level)) / self.slope
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SafetyParams {
    /// Stopping distance `d0` [m].
    pub d0: f64,
    /// Headway time `t_h` [s].
    pub t_h: f64,
    /// Leader/follower activation slope `m_lf` [1/m].
    pub m_lf: f64,
    /// Activation used along the horizon.
    pub p0: ActivationParams,
    /// Activation of the terminal certificate.
    pub p_n: ActivationParams,
    /// Margin `eps_d` of the interpolated activation.
    pub eps_d: f64,
    /// Velocity ceiling `v_max` [m/s].
    pub v_max: f64,
}

impl SafetyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d0,
            self.t_h,
            self.m_lf,
            self.eps_d,
            self.v_max,
            self.p0.slope,
            self.p_n.slope,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "d0, t_h, m_lf, eps_d, v_max and activation slopes must be positive",
            ));
        }
        if !self.p0.offset.is_finite() || !self.p_n.offset.is_finite() {
            return Err(Error::InvalidParameter("activation offsets must be finite"));
        }
        Ok(())
    }
}

/// Lower velocity barrier `h = v`.
#[inline]
pub fn h_vmin<T: Scalar>(v: T) -> T {
    v
}

/// Upper velocity barrier `h = v_max - v`.
#[inline]
pub fn h_vmax<T: Scalar>(v: T, v_max: f64) -> T {
    -v + v_max
}

/// Merge-zone activation `L_d(x; p)`, a function of `s1` only.
#[inline]
pub fn activation<T: Scalar>(x: &[T; 4], p: &ActivationParams) -> T {
    logistic((x[S1] - p.offset) * p.slope)
}

/// Leader/follower activation `L_lf`, close to 1 when agent 2 is ahead.
#[inline]
pub fn leader_follower<T: Scalar>(x: &[T; 4], m_lf: f64) -> T {
    logistic((x[S2] - x[S1]) * m_lf)
}

/// Smoothed velocity of the following agent.
#[inline]
pub fn follower_velocity<T: Scalar>(x: &[T; 4], m_lf: f64) -> T {
    let l = leader_follower(x, m_lf);
    l * x[V1] + (-l + 1.0) * x[V2]
}

/// Smoothed minimum safety distance `d0 + v_f t_h`.
#[inline]
pub fn d_safe_smooth<T: Scalar>(x: &[T; 4], sp: &SafetyParams) -> T {
    follower_velocity(x, sp.m_lf) * sp.t_h + sp.d0
}

/// Squared-distance barrier `(s1 - s2)² - (L_d(x; p) d_safe(x))²`.
#[inline]
pub fn h_d<T: Scalar>(x: &[T; 4], p: &ActivationParams, sp: &SafetyParams) -> T {
    (x[S1] - x[S2]).sqr() - (activation(x, p) * d_safe_smooth(x, sp)).sqr()
}

/// Interpolated activation `L_d(p0) (1 + L_d(pN) - L_d(p0) - eps_d)`.
#[inline]
pub fn interpolated_activation<T: Scalar>(x: &[T; 4], p0: &ActivationParams, p_n: &ActivationParams, eps_d: f64) -> T {
    let l0 = activation(x, p0);
    let ln = activation(x, p_n);
    l0 * (ln - l0 + (1.0 - eps_d))
}

/// Minimum safety distance used along the horizon, `Lbar_d d_safe`.
#[inline]
pub fn min_safety_distance<T: Scalar>(x: &[T; 4], sp: &SafetyParams) -> T {
    interpolated_activation(x, &sp.p0, &sp.p_n, sp.eps_d) * d_safe_smooth(x, sp)
}

/// Relaxed in-horizon barrier `H_d = (s1 - s2)² - (Lbar_d d_safe)²`.
#[inline]
pub fn relaxed_h_d<T: Scalar>(x: &[T; 4], sp: &SafetyParams) -> T {
    (x[S1] - x[S2]).sqr() - min_safety_distance(x, sp).sqr()
}

/// Smoothed leader-minus-follower velocity.
#[inline]
pub fn delta_v<T: Scalar>(x: &[T; 4], m_lf: f64) -> T {
    let l = leader_follower(x, m_lf);
    let diff = x[V2] - x[V1];
    l * diff - (-l + 1.0) * diff
}

/// Which activation parameter set a registered function uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationChoice {
    Horizon,
    Terminal,
}

impl ActivationChoice {
    pub fn params<'a>(&self, sp: &'a SafetyParams) -> &'a ActivationParams {
        match self {
            ActivationChoice::Horizon => &sp.p0,
            ActivationChoice::Terminal => &sp.p_n,
        }
    }
}

/// Registry of every smooth function the solver and verifier differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FunctionId {
    VelocityLower { agent: u8 },
    VelocityUpper { agent: u8 },
    Activation(ActivationChoice),
    LeaderFollower,
    FollowerVelocity,
    SafeDistance,
    DistanceBarrier(ActivationChoice),
    InterpolatedActivation,
    RelaxedDistanceBarrier,
    RelativeVelocity,
}

impl FunctionId {
    pub const ALL: [FunctionId; 14] = [
        FunctionId::VelocityLower { agent: 1 },
        FunctionId::VelocityLower { agent: 2 },
        FunctionId::VelocityUpper { agent: 1 },
        FunctionId::VelocityUpper { agent: 2 },
        FunctionId::Activation(ActivationChoice::Horizon),
        FunctionId::Activation(ActivationChoice::Terminal),
        FunctionId::LeaderFollower,
        FunctionId::FollowerVelocity,
        FunctionId::SafeDistance,
        FunctionId::DistanceBarrier(ActivationChoice::Horizon),
        FunctionId::DistanceBarrier(ActivationChoice::Terminal),
        FunctionId::InterpolatedActivation,
        FunctionId::RelaxedDistanceBarrier,
        FunctionId::RelativeVelocity,
    ];

    pub fn name(&self) -> &'static str {
        use ActivationChoice::*;
        match self {
            FunctionId::VelocityLower { agent: 1 } => "h_vmin1",
            FunctionId::VelocityLower { .. } => "h_vmin2",
            FunctionId::VelocityUpper { agent: 1 } => "h_vmax1",
            FunctionId::VelocityUpper { .. } => "h_vmax2",
            FunctionId::Activation(Horizon) => "L_d_p0",
            FunctionId::Activation(Terminal) => "L_d_pN",
            FunctionId::LeaderFollower => "L_lf",
            FunctionId::FollowerVelocity => "v_f",
            FunctionId::SafeDistance => "d_safe",
            FunctionId::DistanceBarrier(Horizon) => "h_d_p0",
            FunctionId::DistanceBarrier(Terminal) => "h_d_pN",
            FunctionId::InterpolatedActivation => "Lbar_d",
            FunctionId::RelaxedDistanceBarrier => "H_d",
            FunctionId::RelativeVelocity => "delta_v",
        }
    }

    pub fn evaluate<T: Scalar>(&self, x: &[T; 4], sp: &SafetyParams) -> T {
        match *self {
            FunctionId::VelocityLower { agent } => h_vmin(x[velocity_index(agent)]),
            FunctionId::VelocityUpper { agent } => h_vmax(x[velocity_index(agent)], sp.v_max),
            FunctionId::Activation(c) => activation(x, c.params(sp)),
            FunctionId::LeaderFollower => leader_follower(x, sp.m_lf),
            FunctionId::FollowerVelocity => follower_velocity(x, sp.m_lf),
            FunctionId::SafeDistance => d_safe_smooth(x, sp),
            FunctionId::DistanceBarrier(c) => h_d(x, c.params(sp), sp),
            FunctionId::InterpolatedActivation => interpolated_activation(x, &sp.p0, &sp.p_n, sp.eps_d),
            FunctionId::RelaxedDistanceBarrier => relaxed_h_d(x, sp),
            FunctionId::RelativeVelocity => delta_v(x, sp.m_lf),
        }
    }
}

fn velocity_index(agent: u8) -> usize {
    if agent == 1 {
        V1
    } else {
        V2
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FunctionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FunctionId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or(Error::InvalidParameter("unknown function id"))
    }
}

/// Value and exact gradient with respect to `(s1, v1, s2, v2)`.
pub fn eval_with_gradient(id: FunctionId, x: &[f64; 4], sp: &SafetyParams) -> (f64, [f64; 4]) {
    let d = id.evaluate(&Dual::<f64, 4>::seed(*x), sp);
    (d.value, d.partials)
}

/// Same as [`eval_with_gradient`] but looked up by registry name.
pub fn eval_named_with_gradient(name: &str, x: &[f64; 4], sp: &SafetyParams) -> Result<(f64, [f64; 4])> {
    let id: FunctionId = name.parse()?;
    Ok(eval_with_gradient(id, x, sp))
}
