//! Global verification of the terminal safety-distance certificates.
//!
//! Two conditions are checked over a compact box of lumped states:
//!
//! * `qdtcbf`: with the feedback policy [`kappa`] applied twice, the
//!   two-step gap `h(x₂) − (1 − γ_d) h(x₁)` is nonnegative on every state
//!   satisfying `h(x₀) ≥ 0`, the one-step certificate
//!   `h(x₁) − (1 − γ_d) h(x₀) ≥ 0` and `Δv(x₀) ≥ Δv_min`.
//! * `dtcbf`: on every state with `h(x₀) ≥ 0` and `Δv(x₀) ≥ Δv_min` some
//!   admissible input gives `h(f(x₀, u)) ≥ (1 − γ_d) h(x₀)`.
//!
//! Both use interval branch-and-bound. Each box is bounded by the natural
//! interval extension intersected with a mean-value form whose gradient
//! enclosure comes from `Dual<Interval, 4>`. The policy is evaluated over the
//! whole box, not frozen at its center, so a certified box covers every state
//! in it. Undecided boxes are split along the widest scaled dimension and
//! probed for counterexamples by a local descent from their center.

use alloc::collections::BinaryHeap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};

use crate::ad::Dual;
use crate::dynamics::{ControlInput, DiscreteDynamics, LumpedState};
use crate::error::{Error, Result};
use crate::interval::{Interval, StateBox};
use crate::ocp::{CertificateParams, OcpConfig};
use crate::safety::{delta_v, h_d, SafetyParams};
use crate::scalar::{logistic, Scalar};
use crate::simloop::Clock;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CertificateKind {
    Dtcbf,
    Qdtcbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Verdict {
    Certified,
    Falsified,
    Inconclusive,
}

/// Everything the certificate conditions depend on.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerificationProblem {
    pub dynamics: DiscreteDynamics,
    pub safety: SafetyParams,
    pub cert: CertificateParams,
    /// Per-agent `[lower, upper]` acceleration bounds.
    pub input_bounds: [[f64; 2]; 2],
}

impl VerificationProblem {
    pub fn from_ocp(cfg: &OcpConfig) -> Self {
        Self {
            dynamics: cfg.dynamics,
            safety: cfg.safety,
            cert: cfg.cert,
            input_bounds: cfg.input_bounds,
        }
    }

    /// Copy with both agents limited to `[−bound, bound]`.
    pub fn with_symmetric_bound(&self, bound: f64) -> Self {
        Self {
            input_bounds: [[-bound, bound]; 2],
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.safety.validate()?;
        self.cert.validate()?;
        if !(self.dynamics.ts > 0.0) {
            return Err(Error::InvalidParameter("sample time must be positive"));
        }
        for [lo, hi] in self.input_bounds {
            if !(lo <= 0.0 && 0.0 <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParameter("input bounds must be finite and bracket zero"));
            }
        }
        Ok(())
    }

    /// Acceleration range `(brake, accelerate)` of one agent that keeps its
    /// velocity certificates with rate `γ_v` and respects the input box.
    pub fn velocity_input_range<T: Scalar>(&self, v: T, agent: usize) -> (T, T) {
        let k = self.cert.gamma_v / self.dynamics.ts;
        let [lo, hi] = self.input_bounds[agent];
        let brake = T::cst(lo).max(-(v * k));
        let accel = T::cst(hi).min((-v + self.safety.v_max) * k);
        (brake, accel)
    }

    fn barrier<T: Scalar>(&self, x: &[T; 4]) -> T {
        h_d(x, &self.safety.p_n, &self.safety)
    }

    fn relative_velocity_margin<T: Scalar>(&self, x: &[T; 4]) -> T {
        delta_v(x, self.safety.m_lf) - self.cert.dv_min
    }

    fn decay(&self) -> f64 {
        1.0 - self.cert.gamma_d
    }
}

/// Separation policy: the leader accelerates and the follower brakes as hard
/// as the input box and the velocity certificates allow, blended by the
/// smooth leader/follower indicator.
pub fn kappa<T: Scalar>(x: &[T; 4], vp: &VerificationProblem) -> [T; 2] {
    let one_leads = crate::safety::leader_follower(x, vp.safety.m_lf);
    let (b1, a1) = vp.velocity_input_range(x[1], 0);
    let (b2, a2) = vp.velocity_input_range(x[3], 1);
    let other = -one_leads + 1.0;
    [one_leads * b1 + other * a1, one_leads * a2 + other * b2]
}

pub fn kappa_input(x: &LumpedState, vp: &VerificationProblem) -> ControlInput {
    ControlInput::from_array(kappa(&x.to_array(), vp))
}

/// Left-hand sides of the two-step verification problem at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TwoStepGap {
    /// `h(x₂) − (1 − γ_d) h(x₁)`, the quantity that must be nonnegative.
    pub gap: f64,
    /// `h(x₁) − (1 − γ_d) h(x₀)`.
    pub one_step: f64,
    /// `h(x₀)`.
    pub barrier: f64,
    /// `Δv(x₀) − Δv_min`.
    pub relative_velocity: f64,
}

impl TwoStepGap {
    /// Whether the state satisfies the side constraints to within `tol`.
    pub fn admissible(&self, tol: f64) -> bool {
        self.one_step >= -tol && self.barrier >= -tol && self.relative_velocity >= -tol
    }
}

/// `[gap, one_step, barrier, relative_velocity]` over any scalar type.
pub fn two_step_terms<T: Scalar>(x: &[T; 4], vp: &VerificationProblem) -> [T; 4] {
    let x1 = vp.dynamics.step_array(x, &kappa(x, vp));
    let x2 = vp.dynamics.step_array(&x1, &kappa(&x1, vp));
    let (h0, h1, h2) = (vp.barrier(x), vp.barrier(&x1), vp.barrier(&x2));
    let g = vp.decay();
    [h2 - h1 * g, h1 - h0 * g, h0, vp.relative_velocity_margin(x)]
}

pub fn two_step_gap(x: &LumpedState, vp: &VerificationProblem) -> TwoStepGap {
    let [gap, one_step, barrier, relative_velocity] = two_step_terms(&x.to_array(), vp);
    TwoStepGap {
        gap,
        one_step,
        barrier,
        relative_velocity,
    }
}

/// The four extreme admissible inputs (brake or accelerate per agent).
pub fn candidate_inputs<T: Scalar>(x: &[T; 4], vp: &VerificationProblem) -> [[T; 2]; 4] {
    let (b1, a1) = vp.velocity_input_range(x[1], 0);
    let (b2, a2) = vp.velocity_input_range(x[3], 1);
    [[b1, b2], [b1, a2], [a1, b2], [a1, a2]]
}

/// `[gap for each candidate input, barrier, relative_velocity]`.
pub fn one_step_terms<T: Scalar>(x: &[T; 4], vp: &VerificationProblem) -> [T; 6] {
    let h0 = vp.barrier(x);
    let floor = h0 * vp.decay();
    let c = candidate_inputs(x, vp);
    let gap = |u: &[T; 2]| vp.barrier(&vp.dynamics.step_array(x, u)) - floor;
    [
        gap(&c[0]),
        gap(&c[1]),
        gap(&c[2]),
        gap(&c[3]),
        h0,
        vp.relative_velocity_margin(x),
    ]
}

/// One-step certificate at a state, using the best extreme input.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OneStepGap {
    /// `max_u h(f(x, u)) − (1 − γ_d) h(x)` over the extreme inputs.
    pub gap: f64,
    pub input: ControlInput,
    pub barrier: f64,
    pub relative_velocity: f64,
}

impl OneStepGap {
    pub fn admissible(&self, tol: f64) -> bool {
        self.barrier >= -tol && self.relative_velocity >= -tol
    }
}

pub fn one_step_gap(x: &LumpedState, vp: &VerificationProblem) -> OneStepGap {
    let xa = x.to_array();
    let t = one_step_terms(&xa, vp);
    let c = candidate_inputs(&xa, vp);
    let best = (0..4).fold(0, |b, i| if t[i] > t[b] { i } else { b });
    OneStepGap {
        gap: t[best],
        input: ControlInput::from_array(c[best]),
        barrier: t[4],
        relative_velocity: t[5],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct VerifierOptions {
    /// A box is certified once its gap lower bound reaches `−tol`.
    pub tol: f64,
    /// Maximum number of boxes processed.
    pub budget: u64,
    /// Side-constraint slack accepted for counterexamples.
    pub feasibility_tol: f64,
    /// Meters per m/s when picking the split dimension.
    pub velocity_scale: f64,
    /// Descent iterations per counterexample probe.
    pub descent_iters: usize,
    /// Box budget for proving that no input works at a one-step counterexample.
    pub input_budget: usize,
}

impl Default for VerifierOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            budget: 5_000_000,
            feasibility_tol: 1e-8,
            velocity_scale: 10.0,
            descent_iters: 40,
            input_budget: 4096,
        }
    }
}

impl VerifierOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol >= 0.0) || !(self.feasibility_tol >= 0.0) || !(self.velocity_scale > 0.0) {
            return Err(Error::InvalidParameter(
                "tolerances must be nonnegative and the velocity scale positive",
            ));
        }
        if self.budget == 0 {
            return Err(Error::InvalidParameter("node budget must be positive"));
        }
        Ok(())
    }
}

/// Default verification box: positions in `[−250, 60]` m and velocities in
/// `[0, v_max]`.
pub fn default_domain(sp: &SafetyParams) -> StateBox {
    StateBox::symmetric(Interval::new(-250.0, 60.0), Interval::new(0.0, sp.v_max))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerificationReport {
    pub kind: CertificateKind,
    pub verdict: Verdict,
    pub counterexample: Option<LumpedState>,
    /// Gap at the counterexample. For `dtcbf` this is an upper bound over
    /// all admissible inputs.
    pub counterexample_gap: Option<f64>,
    /// Smallest gap lower bound over the certified boxes (`+inf` if none).
    pub certified_lower_bound: f64,
    /// Lower bound of the worst box left open when the search stopped.
    pub open_lower_bound: Option<f64>,
    /// The box that `open_lower_bound` belongs to.
    pub open_box: Option<StateBox>,
    pub nodes_explored: u64,
    /// Boxes discarded because a side constraint fails on all of them.
    pub nodes_infeasible: u64,
    pub wall_time: f64,
    pub domain: StateBox,
    pub input_bounds: [[f64; 2]; 2],
    pub gamma_d: f64,
    /// Certified only because no state in the domain meets the side constraints.
    pub vacuous: bool,
    pub cancelled: bool,
    pub notes: Vec<String>,
}

struct Node {
    lb: f64,
    b: StateBox,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.lb.total_cmp(&other.lb) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // Max-heap on the negated bound: the least certain box comes out first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.lb.total_cmp(&self.lb)
    }
}

/// Terms of one certificate kind over the search coordinates
/// `y = (s1, v1, s1 − s2, v2)`, generic over the scalar type.
///
/// Branching on the gap `s1 − s2` instead of `s2` keeps the distance, which
/// every barrier depends on, free of interval dependency. The domain limits
/// on `s2` become the last two (linear) side constraints.
trait Terms<const M: usize> {
    /// Leading terms that are gaps; the rest are side constraints.
    const GAPS: usize;
    fn eval<T: Scalar>(&self, y: &[T; 4]) -> [T; M];
}

fn to_state<T: Scalar>(y: &[T; 4]) -> [T; 4] {
    [y[0], y[1], y[0] - y[2], y[3]]
}

struct TwoStep<'a> {
    vp: &'a VerificationProblem,
    s2: Interval,
}

struct OneStep<'a> {
    vp: &'a VerificationProblem,
    s2: Interval,
}

// The search evaluates everything directly in relative coordinates. The
// formulas match the state-space ones in `safety` and `dynamics` term by
// term; only `s1 − s2` is never formed, so intervals keep the distance exact.

fn rel_leader_follower<T: Scalar>(vp: &VerificationProblem, y: &[T; 4]) -> T {
    logistic(-y[2] * vp.safety.m_lf)
}

fn rel_barrier<T: Scalar>(vp: &VerificationProblem, y: &[T; 4]) -> T {
    let sp = &vp.safety;
    let l = rel_leader_follower(vp, y);
    let vf = l * y[1] + (-l + 1.0) * y[3];
    let ld = logistic((y[0] - sp.p_n.offset) * sp.p_n.slope);
    y[2].sqr() - (ld * (vf * sp.t_h + sp.d0)).sqr()
}

fn rel_velocity_margin<T: Scalar>(vp: &VerificationProblem, y: &[T; 4]) -> T {
    let l = rel_leader_follower(vp, y);
    let diff = y[3] - y[1];
    l * diff - (-l + 1.0) * diff - vp.cert.dv_min
}

fn rel_kappa<T: Scalar>(vp: &VerificationProblem, y: &[T; 4]) -> [T; 2] {
    let one_leads = rel_leader_follower(vp, y);
    let (b1, a1) = vp.velocity_input_range(y[1], 0);
    let (b2, a2) = vp.velocity_input_range(y[3], 1);
    let other = -one_leads + 1.0;
    [one_leads * b1 + other * a1, one_leads * a2 + other * b2]
}

fn rel_step<T: Scalar>(vp: &VerificationProblem, y: &[T; 4], u: &[T; 2]) -> [T; 4] {
    let dy = &vp.dynamics;
    let (s1, v1) = dy.agent_step(y[0], y[1], u[0]);
    let gap = y[2] + (y[1] - y[3]) * dy.a[0][1] + (u[0] - u[1]) * dy.b[0];
    [s1, v1, gap, y[3] + u[1] * dy.b[1]]
}

impl Terms<6> for TwoStep<'_> {
    const GAPS: usize = 1;
    fn eval<T: Scalar>(&self, y: &[T; 4]) -> [T; 6] {
        let vp = self.vp;
        let y1 = rel_step(vp, y, &rel_kappa(vp, y));
        let y2 = rel_step(vp, &y1, &rel_kappa(vp, &y1));
        let (h0, h1, h2) = (rel_barrier(vp, y), rel_barrier(vp, &y1), rel_barrier(vp, &y2));
        let g = vp.decay();
        let s2 = y[0] - y[2];
        [
            h2 - h1 * g,
            h1 - h0 * g,
            h0,
            rel_velocity_margin(vp, y),
            s2 - self.s2.lo,
            -s2 + self.s2.hi,
        ]
    }
}

impl Terms<8> for OneStep<'_> {
    const GAPS: usize = 4;
    fn eval<T: Scalar>(&self, y: &[T; 4]) -> [T; 8] {
        let vp = self.vp;
        let h0 = rel_barrier(vp, y);
        let floor = h0 * vp.decay();
        let (b1, a1) = vp.velocity_input_range(y[1], 0);
        let (b2, a2) = vp.velocity_input_range(y[3], 1);
        let gap = |u: [T; 2]| rel_barrier(vp, &rel_step(vp, y, &u)) - floor;
        let s2 = y[0] - y[2];
        [
            gap([b1, b2]),
            gap([b1, a2]),
            gap([a1, b2]),
            gap([a1, a2]),
            h0,
            rel_velocity_margin(vp, y),
            s2 - self.s2.lo,
            -s2 + self.s2.hi,
        ]
    }
}

/// Natural extension, center value and gradient enclosure of every term
/// over one box.
struct Enclosure<const M: usize> {
    natural: [Interval; M],
    at_center: [Interval; M],
    slopes: [[Interval; 4]; M],
    offsets: [Interval; 4],
    half_widths: [f64; 4],
}

fn enclose<F: Terms<M>, const M: usize>(f: &F, b: &StateBox) -> Enclosure<M> {
    let c = b.mid();
    // The value part of the interval dual is the natural extension.
    let slopes = f.eval(&Dual::<Interval, 4>::seed(b.dims));
    Enclosure {
        natural: slopes.map(|d| d.value),
        at_center: f.eval(&c.map(Interval::point)),
        slopes: slopes.map(|d| d.partials),
        offsets: core::array::from_fn(|i| b.dims[i] - c[i]),
        half_widths: b.dims.map(|d| 0.5 * d.width()),
    }
}

impl<const M: usize> Enclosure<M> {
    /// Enclosure of `f_k − Σ λ_j f_j` over the box.
    fn combined(&self, k: usize, lambda: &[(usize, f64)]) -> Interval {
        let mut natural = self.natural[k];
        let mut value = self.at_center[k];
        let mut slope = self.slopes[k];
        for &(j, l) in lambda {
            natural = natural - self.natural[j] * l;
            value = value - self.at_center[j] * l;
            for i in 0..4 {
                slope[i] = slope[i] - self.slopes[j][i] * l;
            }
        }
        let mut mv = value;
        for i in 0..4 {
            mv = mv + slope[i] * self.offsets[i];
        }
        natural.intersect(&mv).unwrap_or(natural)
    }

    fn term(&self, k: usize) -> Interval {
        self.combined(k, &[])
    }

    /// Lower bound of gap `k` over the points of the box where the side
    /// constraints `cons` hold. Uses `gap ≥ gap − Σ λ_j c_j` for `λ ≥ 0`,
    /// with `λ` fitted so that the combined gradient at the center is small.
    fn lower_bound(&self, k: usize, cons: &[usize]) -> f64 {
        let plain = self.term(k).lo;
        if plain >= 0.0 || cons.is_empty() {
            return plain;
        }
        let scaled = |j: usize| -> [f64; 4] { core::array::from_fn(|i| self.slopes[j][i].mid() * self.half_widths[i]) };
        let g = scaled(k);
        let mut active = [(0usize, [0.0; 4]); 4];
        let mut n = 0;
        for &j in cons.iter().take(4) {
            active[n] = (j, scaled(j));
            n += 1;
        }
        // Least squares, dropping the most negative multiplier until all are nonnegative.
        while n > 0 {
            let mut cols = [[0.0; 4]; 4];
            for (c, a) in cols.iter_mut().zip(&active[..n]) {
                *c = a.1;
            }
            let Some(l) = least_squares(&cols[..n], &g) else {
                n -= 1;
                continue;
            };
            let worst = (0..n).min_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap_or(0);
            if l[worst] >= 0.0 && l[..n].iter().all(|v| v.is_finite()) {
                let mut lambda = [(0usize, 0.0); 4];
                for r in 0..n {
                    lambda[r] = (active[r].0, l[r]);
                }
                return plain.max(self.combined(k, &lambda[..n]).lo);
            }
            active.copy_within(worst + 1..n, worst);
            n -= 1;
        }
        plain
    }

    /// Dimension whose width contributes most to the spread of term `k`.
    fn smear(&self, k: usize, scale: &[f64; 4]) -> usize {
        let mut best = 0;
        let mut top = f64::NEG_INFINITY;
        for i in 0..4 {
            let v = self.slopes[k][i].mag() * self.half_widths[i];
            // Ties (for example all-zero slopes) fall back to the scaled width.
            let v = if v.is_finite() {
                v + 1e-12 * self.half_widths[i] * scale[i]
            } else {
                f64::INFINITY
            };
            if v > top {
                top = v;
                best = i;
            }
        }
        best
    }
}

/// Solves `min ‖g − Σ λ_j a_j‖` for at most four columns.
fn least_squares(a: &[[f64; 4]], g: &[f64; 4]) -> Option<[f64; 4]> {
    let n = a.len();
    let dot = |x: &[f64; 4], y: &[f64; 4]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let mut m = [[0.0; 5]; 4];
    for r in 0..n {
        for c in 0..n {
            m[r][c] = dot(&a[r], &a[c]);
        }
        m[r][4] = dot(&a[r], g);
    }
    // Gauss-Jordan elimination with partial pivoting on the normal equations.
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if !(m[piv][col].abs() > 1e-300) {
            return None;
        }
        m.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..5 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut out = [0.0; 4];
    for r in 0..n {
        out[r] = m[r][4] / m[r][r];
    }
    Some(out)
}

/// Verifies `kind` over `domain`.
///
/// `cancel` is polled periodically; a cancelled run reports `Inconclusive`
/// unless it already found a counterexample.
pub fn verify(
    kind: CertificateKind,
    vp: &VerificationProblem,
    domain: &StateBox,
    opts: &VerifierOptions,
    clock: &dyn Clock,
    cancel: Option<&AtomicBool>,
) -> Result<VerificationReport> {
    vp.validate()?;
    opts.validate()?;
    if domain.dims.iter().any(|d| !d.lo.is_finite() || !d.hi.is_finite()) {
        return Err(Error::InvalidParameter("verification domain must be bounded"));
    }
    let start = clock.now();
    let mut search = Search {
        vp,
        opts,
        scale: [1.0, opts.velocity_scale, 1.0, opts.velocity_scale],
        nodes: 0,
        infeasible: 0,
        certified_lb: f64::INFINITY,
        found: None,
        probes: 0,
    };
    let (open, cancelled) = match kind {
        CertificateKind::Qdtcbf => search.run(domain, &TwoStep { vp, s2: domain.dims[2] }, cancel),
        CertificateKind::Dtcbf => search.run(domain, &OneStep { vp, s2: domain.dims[2] }, cancel),
    };
    let verdict = if search.found.is_some() {
        Verdict::Falsified
    } else if open.is_some() {
        Verdict::Inconclusive
    } else {
        Verdict::Certified
    };
    let mut notes = Vec::new();
    if kind == CertificateKind::Qdtcbf {
        notes.push(String::from(
            "both steps use the fixed policy kappa; other inputs satisfying the two-step condition are not considered",
        ));
    } else {
        notes.push(String::from(
            "inputs are restricted to those that also keep the velocity certificates",
        ));
    }
    notes.push(String::from("states are quantified over the reported domain box only"));
    let vacuous = verdict == Verdict::Certified && search.certified_lb == f64::INFINITY;
    if vacuous {
        notes.push(String::from(VACUOUS_NOTE));
    }
    Ok(VerificationReport {
        kind,
        verdict,
        counterexample: search.found.map(|(x, _)| LumpedState::from_array(x)),
        counterexample_gap: search.found.map(|(_, g)| g),
        certified_lower_bound: search.certified_lb,
        open_lower_bound: open.map(|(lb, _)| lb),
        open_box: open.map(|(_, b)| b),
        nodes_explored: search.nodes,
        nodes_infeasible: search.infeasible,
        wall_time: clock.now() - start,
        domain: *domain,
        input_bounds: vp.input_bounds,
        gamma_d: vp.cert.gamma_d,
        vacuous,
        cancelled,
        notes,
    })
}

const VACUOUS_NOTE: &str = "no state in the domain satisfies the side constraints";

/// Splits `domain` into `parts` equal slabs along `s1`.
pub fn partition_domain(domain: &StateBox, parts: usize) -> Vec<StateBox> {
    let parts = parts.max(1);
    let s1 = domain.dims[0];
    let w = s1.width() / parts as f64;
    (0..parts)
        .map(|i| {
            let lo = if i == 0 { s1.lo } else { s1.lo + w * i as f64 };
            let hi = if i + 1 == parts {
                s1.hi
            } else {
                s1.lo + w * (i + 1) as f64
            };
            let mut b = *domain;
            b.dims[0] = Interval::new(lo, hi.max(lo));
            b
        })
        .collect()
}

/// Combines the reports of searches over a partition of `domain`.
///
/// Any counterexample falsifies the whole domain. Otherwise a single open
/// part makes the result inconclusive.
pub fn merge_reports(domain: &StateBox, reports: Vec<VerificationReport>) -> Option<VerificationReport> {
    let mut it = reports.into_iter();
    let mut out = it.next()?;
    out.domain = *domain;
    for r in it {
        out.nodes_explored += r.nodes_explored;
        out.nodes_infeasible += r.nodes_infeasible;
        out.wall_time = out.wall_time.max(r.wall_time);
        out.certified_lower_bound = out.certified_lower_bound.min(r.certified_lower_bound);
        out.cancelled |= r.cancelled;
        out.vacuous &= r.vacuous;
        if out.counterexample.is_none() && r.counterexample.is_some() {
            out.counterexample = r.counterexample;
            out.counterexample_gap = r.counterexample_gap;
        }
        if let Some(lb) = r.open_lower_bound {
            if out.open_lower_bound.is_none_or(|o| lb < o) {
                out.open_lower_bound = Some(lb);
                out.open_box = r.open_box;
            }
        }
        for n in r.notes {
            if !out.notes.contains(&n) {
                out.notes.push(n);
            }
        }
    }
    out.verdict = if out.counterexample.is_some() {
        Verdict::Falsified
    } else if out.open_lower_bound.is_some() {
        Verdict::Inconclusive
    } else {
        Verdict::Certified
    };
    out.vacuous &= out.verdict == Verdict::Certified;
    if !out.vacuous {
        out.notes.retain(|n| n != VACUOUS_NOTE);
    }
    Some(out)
}

pub fn verify_qdtcbf(
    vp: &VerificationProblem,
    domain: &StateBox,
    opts: &VerifierOptions,
    clock: &dyn Clock,
) -> Result<VerificationReport> {
    verify(CertificateKind::Qdtcbf, vp, domain, opts, clock, None)
}

pub fn verify_dtcbf(
    vp: &VerificationProblem,
    domain: &StateBox,
    opts: &VerifierOptions,
    clock: &dyn Clock,
) -> Result<VerificationReport> {
    verify(CertificateKind::Dtcbf, vp, domain, opts, clock, None)
}

/// Only every so many undecided nodes get a local descent from the center.
const DESCENT_STRIDE: u64 = 8;

/// Newton steps onto violated side constraints, one constraint at a time,
/// staying inside `b`. Returns `None` if feasibility is not reached.
fn restore<F: Terms<M>, const M: usize>(f: &F, b: &StateBox, mut x: [f64; 4]) -> Option<[f64; 4]> {
    for _ in 0..8 {
        let t = f.eval(&Dual::<f64, 4>::seed(x));
        let worst = (F::GAPS..M).min_by(|&i, &j| t[i].value.total_cmp(&t[j].value))?;
        let c = &t[worst];
        if c.value >= 0.0 {
            return Some(x);
        }
        let g = c.partials;
        let norm2: f64 = g.iter().map(|v| v * v).sum();
        if !(norm2 > 0.0) || !norm2.is_finite() {
            return None;
        }
        // Aim slightly inside so rounding does not leave the point outside.
        let step = -c.value * (1.0 + 1e-6) / norm2;
        x = b.clamp(core::array::from_fn(|i| x[i] + step * g[i]));
    }
    None
}

struct Search<'a> {
    vp: &'a VerificationProblem,
    opts: &'a VerifierOptions,
    scale: [f64; 4],
    nodes: u64,
    infeasible: u64,
    certified_lb: f64,
    found: Option<([f64; 4], f64)>,
    probes: u64,
}

impl Search<'_> {
    /// Returns the worst open bound (if any box stayed open) and whether the
    /// run was cancelled.
    fn run<F: Terms<M>, const M: usize>(
        &mut self,
        domain: &StateBox,
        f: &F,
        cancel: Option<&AtomicBool>,
    ) -> (Option<(f64, StateBox)>, bool) {
        let d = domain.dims;
        let mut heap = BinaryHeap::new();
        heap.push(Node {
            lb: f64::NEG_INFINITY,
            b: StateBox::new(d[0], d[1], d[0] - d[2], d[3]),
        });
        let tol = self.opts.tol;
        while let Some(node) = heap.pop() {
            if self.nodes >= self.opts.budget {
                return (Some((node.lb, state_box(&node.b))), false);
            }
            if self.nodes % 1024 == 0 && cancel.is_some_and(|c| c.load(AtomicOrdering::Relaxed)) {
                return (Some((node.lb, state_box(&node.b))), true);
            }
            self.nodes += 1;
            let b = node.b;
            // The plain interval evaluation is several times cheaper than
            // the slope enclosure and already decides many boxes.
            let natural = f.eval(&b.dims);
            if natural[F::GAPS..].iter().any(|c| c.hi < 0.0) {
                self.infeasible += 1;
                continue;
            }
            let plain = natural[..F::GAPS].iter().fold(f64::NEG_INFINITY, |m, g| m.max(g.lo));
            if plain >= -tol {
                self.certified_lb = self.certified_lb.min(plain);
                continue;
            }
            let e = enclose(f, &b);
            let mut open = [0usize; M];
            let mut n_open = 0;
            let mut infeasible = false;
            for j in F::GAPS..M {
                let c = e.term(j);
                if c.hi < 0.0 {
                    infeasible = true;
                    break;
                }
                // Side constraints that hold on the whole box need no multiplier.
                if c.lo < 0.0 {
                    open[n_open] = j;
                    n_open += 1;
                }
            }
            if infeasible {
                self.infeasible += 1;
                continue;
            }
            let mut lb = f64::NEG_INFINITY;
            let mut best_gap = 0;
            for k in 0..F::GAPS {
                let v = e.lower_bound(k, &open[..n_open]);
                if v > lb {
                    lb = v;
                    best_gap = k;
                }
                if lb >= -tol {
                    break;
                }
            }
            if lb >= -tol {
                self.certified_lb = self.certified_lb.min(lb);
                continue;
            }
            if self.probe::<F, M>(f, &b) {
                return (None, false);
            }
            if b.is_point() {
                // A point box whose bound cannot be tightened further.
                return (Some((lb, state_box(&b))), false);
            }
            let (l, r) = b.split(e.smear(best_gap, &self.scale));
            heap.push(Node { lb, b: l });
            heap.push(Node { lb, b: r });
        }
        (None, false)
    }

    /// Looks for a counterexample in `b`, starting at its center.
    fn probe<F: Terms<M>, const M: usize>(&mut self, f: &F, b: &StateBox) -> bool {
        let c = b.mid();
        let t = f.eval(&c);
        let gap = t[..F::GAPS].iter().fold(f64::NEG_INFINITY, |m, g| m.max(*g));
        if gap >= 0.0 {
            return false;
        }
        if self.accept::<F, M>(f, &c) {
            return true;
        }
        if let Some(x) = restore::<F, M>(f, b, c) {
            if self.accept::<F, M>(f, &x) {
                return true;
            }
        }
        self.probes += 1;
        if self.probes % DESCENT_STRIDE != 0 {
            return false;
        }
        let x = self.descend::<F, M>(f, b, c);
        if self.accept::<F, M>(f, &x) {
            return true;
        }
        restore::<F, M>(f, b, x).is_some_and(|x| self.accept::<F, M>(f, &x))
    }

    fn accept<F: Terms<M>, const M: usize>(&mut self, f: &F, y: &[f64; 4]) -> bool {
        let t = f.eval(y);
        if t[M - 2..].iter().any(|c| *c < 0.0) {
            return false;
        }
        // Confirm with the state-space formulas, which the report exposes.
        let x = to_state(y);
        let (tol, ftol) = (self.opts.tol, self.opts.feasibility_tol);
        let state = LumpedState::from_array(x);
        if F::GAPS == 1 {
            let g = two_step_gap(&state, self.vp);
            if g.admissible(ftol) && g.gap < -tol {
                self.found = Some((x, g.gap));
                return true;
            }
            return false;
        }
        let g = one_step_gap(&state, self.vp);
        if !g.admissible(ftol) || g.gap >= -tol {
            return false;
        }
        // The extreme inputs all fail; prove that every admissible input does.
        match no_input_suffices(self.vp, &x, -tol, self.opts.input_budget) {
            Some(ub) => {
                self.found = Some((x, ub));
                true
            }
            None => false,
        }
    }

    /// Projected descent on the gap plus a quadratic penalty on violated
    /// side constraints, staying inside `b`.
    fn descend<F: Terms<M>, const M: usize>(&self, f: &F, b: &StateBox, x0: [f64; 4]) -> [f64; 4] {
        let merit = |x: &[f64; 4]| -> (f64, [f64; 4]) {
            let t = f.eval(&Dual::<f64, 4>::seed(*x));
            let mut best = 0;
            for k in 1..F::GAPS {
                if t[k].value > t[best].value {
                    best = k;
                }
            }
            let rho = 1e3;
            let mut v = t[best].value;
            let mut g = t[best].partials;
            for c in &t[F::GAPS..] {
                if c.value < 0.0 {
                    v += rho * c.value * c.value;
                    for i in 0..4 {
                        g[i] += 2.0 * rho * c.value * c.partials[i];
                    }
                }
            }
            (v, g)
        };
        // Steps are taken in scaled coordinates so positions and velocities move comparably.
        let w = b.dims.map(|d| d.width());
        let mut x = x0;
        let (mut fx, mut gx) = merit(&x);
        let mut step = 0.25;
        for _ in 0..self.opts.descent_iters {
            let dir: [f64; 4] = core::array::from_fn(|i| -gx[i] * w[i]);
            let norm = dir.iter().map(|d| libm::fabs(*d)).fold(0.0, f64::max);
            if !(norm > 0.0) || !norm.is_finite() {
                break;
            }
            let mut improved = false;
            while step > 1e-9 {
                let trial = b.clamp(core::array::from_fn(|i| x[i] + step * dir[i] * w[i] / norm));
                let (ft, gt) = merit(&trial);
                if ft < fx {
                    x = trial;
                    fx = ft;
                    gx = gt;
                    step = (step * 2.0).min(1.0);
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        x
    }
}

/// Enclosing box in state coordinates of a box in search coordinates.
fn state_box(b: &StateBox) -> StateBox {
    StateBox {
        dims: to_state(&b.dims),
    }
}

/// Upper bound on `max_u h(f(x, u)) − (1 − γ_d) h(x)` over all admissible
/// inputs, returned only if it is below `threshold`.
fn no_input_suffices(vp: &VerificationProblem, x: &[f64; 4], threshold: f64, budget: usize) -> Option<f64> {
    let floor = vp.barrier(x) * vp.decay();
    let (b1, a1) = vp.velocity_input_range(x[1], 0);
    let (b2, a2) = vp.velocity_input_range(x[3], 1);
    if !(b1 <= a1 && b2 <= a2) {
        return None;
    }
    let xi = x.map(Interval::point);
    let next = |u: &[Interval; 2]| -> Interval {
        let natural = vp.barrier(&vp.dynamics.step_array(&xi, u)) - floor;
        let c = u.map(|d| d.mid());
        let at_center = vp.barrier(&vp.dynamics.step_array(&xi, &c.map(Interval::point))) - floor;
        let xd = xi.map(Dual::<Interval, 2>::constant);
        let ud = Dual::<Interval, 2>::seed(*u);
        let slope = vp.barrier(&vp.dynamics.step_array(&xd, &ud));
        let mv = at_center + slope.partials[0] * (u[0] - c[0]) + slope.partials[1] * (u[1] - c[1]);
        natural.intersect(&mv).unwrap_or(natural)
    };
    let mut stack = Vec::from([[Interval::new(b1, a1), Interval::new(b2, a2)]]);
    let mut worst = f64::NEG_INFINITY;
    let mut used = 0;
    while let Some(u) = stack.pop() {
        used += 1;
        if used > budget {
            return None;
        }
        let e = next(&u);
        if e.hi < threshold {
            worst = worst.max(e.hi);
            continue;
        }
        let c = u.map(|d| d.mid());
        let at_center = vp.barrier(&vp.dynamics.step_array(x, &c)) - floor;
        if at_center >= threshold {
            return None;
        }
        let d = if u[0].width() >= u[1].width() { 0 } else { 1 };
        if u[d].width() == 0.0 {
            return None;
        }
        let (l, r) = u[d].bisect();
        let mut ul = u;
        let mut ur = u;
        ul[d] = l;
        ur[d] = r;
        stack.push(ul);
        stack.push(ur);
    }
    Some(worst)
}

/// Outcome of a bisection over symmetric input bounds.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundSearch {
    /// Midpoint of the final bracket.
    pub bound: f64,
    /// Largest bound known not to certify.
    pub lower: f64,
    /// Smallest bound known to certify.
    pub upper: f64,
    /// Every `(bound, verdict)` pair tried, in order.
    pub trials: Vec<(f64, Verdict)>,
}

/// Bisects the symmetric input bound between `bracket.0` (must not certify)
/// and `bracket.1` (must certify) until the bracket is narrower than `tol`.
/// `oracle` runs one verification; anything but `Certified` counts as failure.
pub fn least_input_bound_with(
    vp: &VerificationProblem,
    bracket: (f64, f64),
    tol: f64,
    mut oracle: impl FnMut(&VerificationProblem) -> Result<Verdict>,
) -> Result<BoundSearch> {
    let (mut lo, mut hi) = bracket;
    if !(0.0 <= lo && lo < hi) || !hi.is_finite() {
        return Err(Error::Bracket("need 0 <= low < high"));
    }
    if !(tol > 0.0) {
        return Err(Error::Bracket("tolerance must be positive"));
    }
    let mut trials = Vec::new();
    let v = oracle(&vp.with_symmetric_bound(hi))?;
    trials.push((hi, v));
    if v != Verdict::Certified {
        return Err(Error::Bracket("upper end does not certify"));
    }
    let v = oracle(&vp.with_symmetric_bound(lo))?;
    trials.push((lo, v));
    if v == Verdict::Certified {
        return Err(Error::Bracket("lower end already certifies"));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let v = oracle(&vp.with_symmetric_bound(mid))?;
        trials.push((mid, v));
        if v == Verdict::Certified {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(BoundSearch {
        bound: 0.5 * (lo + hi),
        lower: lo,
        upper: hi,
        trials,
    })
}

/// Least symmetric input bound for which `kind` certifies on `domain`.
pub fn least_input_bound(
    kind: CertificateKind,
    vp: &VerificationProblem,
    domain: &StateBox,
    bracket: (f64, f64),
    tol: f64,
    opts: &VerifierOptions,
    clock: &dyn Clock,
) -> Result<BoundSearch> {
    least_input_bound_with(vp, bracket, tol, |p| {
        Ok(verify(kind, p, domain, opts, clock, None)?.verdict)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{scenario1, scenario2};
    use crate::simloop::NoClock;
    use proptest::prelude::*;

    fn p1() -> VerificationProblem {
        VerificationProblem::from_ocp(&scenario1().ocp)
    }

    fn p2(gamma_d: f64, bound: f64) -> VerificationProblem {
        VerificationProblem::from_ocp(&scenario2(4, gamma_d).ocp).with_symmetric_bound(bound)
    }

    #[test]
    fn kappa_agent_two_leads() {
        let u = kappa(&[-200.0, 13.0, -100.0, 12.5], &p1());
        assert_eq!(u, [-3.0, 3.0]);
    }

    #[test]
    fn kappa_leader_at_ceiling_holds_speed() {
        let u = kappa(&[-200.0, 13.0, -100.0, 15.0], &p1());
        assert_eq!(u[1], 0.0);
    }

    #[test]
    fn kappa_blends_inside_box() {
        let vp = p1();
        let u = kappa(&[-50.0, 0.0, -50.0, 7.0], &vp);
        for a in u {
            assert!(a.is_finite() && (-3.0..=3.0).contains(&a));
        }
        // Equal positions give an even blend.
        let (b1, a1) = vp.velocity_input_range(0.0, 0);
        assert!((u[0] - 0.5 * (b1 + a1)).abs() < 1e-12);
    }

    #[test]
    fn separated_agents_have_positive_gap() {
        let g = two_step_gap(&LumpedState::new(-200.0, 13.0, -150.0, 13.0), &p1());
        assert!(g.gap > 0.0 && g.barrier > 0.0 && g.one_step > 0.0);
    }

    #[test]
    fn relative_velocity_residual_vanishes_at_threshold() {
        let g = two_step_gap(&LumpedState::new(-200.0, 0.5, -100.0, 0.51), &p1());
        assert!(g.relative_velocity.abs() < 1e-12);
    }

    #[test]
    fn point_domain_certifies_in_one_node() {
        let d = StateBox::point([-200.0, 13.0, -150.0, 13.0]);
        let r = verify_qdtcbf(&p1(), &d, &VerifierOptions::default(), &NoClock).unwrap();
        assert_eq!(r.verdict, Verdict::Certified);
        assert_eq!(r.nodes_explored, 1);
        assert!(r.certified_lower_bound > 0.0);
    }

    #[test]
    fn empty_feasible_set_is_vacuous() {
        // The agents overlap, so the barrier is negative everywhere.
        let d = StateBox::new(
            Interval::new(-100.0, -99.9),
            Interval::new(10.0, 11.0),
            Interval::new(-100.0, -99.9),
            Interval::new(10.0, 11.0),
        );
        let r = verify_dtcbf(&p1(), &d, &VerifierOptions::default(), &NoClock).unwrap();
        assert_eq!(r.verdict, Verdict::Certified);
        assert!(r.vacuous);
    }

    #[test]
    fn tiny_budget_is_inconclusive() {
        let vp = p2(0.6, 4.8);
        let opts = VerifierOptions {
            budget: 10,
            ..Default::default()
        };
        let r = verify_qdtcbf(&vp, &default_domain(&vp.safety), &opts, &NoClock).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert_eq!(r.nodes_explored, 10);
    }

    #[test]
    fn one_step_falsified_with_small_inputs() {
        let vp = p2(0.6, 3.0);
        let r = verify_dtcbf(&vp, &default_domain(&vp.safety), &VerifierOptions::default(), &NoClock).unwrap();
        assert_eq!(r.verdict, Verdict::Falsified);
        let x = r.counterexample.unwrap();
        let g = one_step_gap(&x, &vp);
        assert!(g.admissible(1e-8) && g.gap < -1e-6);
        assert!(r.counterexample_gap.unwrap() < -1e-6);
    }

    #[test]
    fn one_step_certified_with_large_inputs() {
        let vp = p2(0.6, 8.0);
        let r = verify_dtcbf(&vp, &default_domain(&vp.safety), &VerifierOptions::default(), &NoClock).unwrap();
        assert_eq!(r.verdict, Verdict::Certified, "{r:?}");
        assert!(r.certified_lower_bound >= -1e-6);
    }

    #[test]
    fn two_step_falsified_counterexample_is_genuine() {
        let vp = p2(0.6, 2.0);
        let r = verify_qdtcbf(&vp, &default_domain(&vp.safety), &VerifierOptions::default(), &NoClock).unwrap();
        assert_eq!(r.verdict, Verdict::Falsified);
        let g = two_step_gap(&r.counterexample.unwrap(), &vp);
        assert!(g.admissible(1e-8) && g.gap < -1e-6);
    }

    #[test]
    fn bisection_rejects_bad_brackets() {
        let vp = p1();
        let always = |v: Verdict| move |_: &VerificationProblem| Ok(v);
        assert!(least_input_bound_with(&vp, (1.0, 2.0), 0.1, always(Verdict::Falsified)).is_err());
        assert!(least_input_bound_with(&vp, (1.0, 2.0), 0.1, always(Verdict::Certified)).is_err());
        assert!(least_input_bound_with(&vp, (2.0, 1.0), 0.1, always(Verdict::Certified)).is_err());
    }

    #[test]
    fn bisection_converges_on_threshold_oracle() {
        let vp = p1();
        let r = least_input_bound_with(&vp, (0.0, 10.0), 1e-3, |p| {
            Ok(if p.input_bounds[0][1] >= 3.7 {
                Verdict::Certified
            } else {
                Verdict::Falsified
            })
        })
        .unwrap();
        assert!((r.bound - 3.7).abs() < 1e-3);
        assert!(r.lower < 3.7 && r.upper >= 3.7);
    }

    proptest! {
        #[test]
        fn policy_within_admissible_range(s1 in -250.0..60.0f64, v1 in 0.0..15.0f64, s2 in -250.0..60.0f64, v2 in 0.0..15.0f64) {
            let vp = p1();
            let u = kappa(&[s1, v1, s2, v2], &vp);
            for (a, v) in [(u[0], v1), (u[1], v2)] {
                let (b, c) = vp.velocity_input_range(v, 0);
                prop_assert!(b - 1e-12 <= a && a <= c + 1e-12);
                prop_assert!((-3.0..=3.0).contains(&a));
                // The next velocity stays within its bounds.
                let vn = v + 0.1 * a;
                prop_assert!(vn >= -1e-12 && vn <= 15.0 + 1e-12);
            }
        }

        #[test]
        fn enclosures_contain_samples(
            c in proptest::array::uniform4(0.0..1.0f64),
            w in proptest::array::uniform4(0.0..1.0f64),
            t in proptest::array::uniform4(0.0..1.0f64),
        ) {
            let vp = p2(0.6, 4.8);
            let lo = [-250.0 + 300.0 * c[0], 14.5 * c[1], -250.0 + 300.0 * c[2], 14.5 * c[3]];
            let hi = [lo[0] + 20.0 * w[0], (lo[1] + 5.0 * w[1]).min(14.5), lo[2] + 20.0 * w[2], (lo[3] + 5.0 * w[3]).min(14.5)];
            let b = StateBox { dims: core::array::from_fn(|i| Interval::new(lo[i], hi[i])) };
            let x: [f64; 4] = core::array::from_fn(|i| lo[i] + t[i] * (hi[i] - lo[i]));
            let wide = Interval::new(-1e3, 1e3);
            let two = TwoStep { vp: &vp, s2: wide };
            let e2 = enclose(&two, &b);
            for (k, v) in two.eval(&x).into_iter().enumerate() {
                prop_assert!(e2.term(k).contains(v), "{:?} misses {v}", e2.term(k));
            }
            let one = OneStep { vp: &vp, s2: wide };
            let e1 = enclose(&one, &b);
            for (k, v) in one.eval(&x).into_iter().enumerate() {
                prop_assert!(e1.term(k).contains(v), "{:?} misses {v}", e1.term(k));
            }
            // Lagrangian bounds hold wherever the side constraints do.
            let t2 = two.eval(&x);
            if t2[1..].iter().all(|c| *c >= 0.0) {
                prop_assert!(e2.lower_bound(0, &[1, 2, 3]) <= t2[0]);
            }
            let t1 = one.eval(&x);
            if t1[4..].iter().all(|c| *c >= 0.0) {
                for k in 0..4 {
                    prop_assert!(e1.lower_bound(k, &[4, 5]) <= t1[k]);
                }
            }
        }
    }
}
