//! Multiple-shooting transcription of the lane-merging OCPs and the
//! receding-horizon step.
//!
//! Decision vector layout: `z = (u_0, …, u_{N−1}, x_1, …, x_N)` with two
//! inputs and four states per stage, so `n = 6N`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::ad::Dual;
use crate::dynamics::{ControlInput, DiscreteDynamics, LumpedState};
use crate::error::{Error, Result};
use crate::nlp::{self, NlpDims, NlpProblem, SolveOptions, SolveResult, SolveStatus};
use crate::safety::{delta_v, h_d, relaxed_h_d, SafetyParams};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    Baseline,
    Certified,
}

/// How a solve without a previous solution is initialized.
///
/// The OCPs are nonconvex and the first solve decides which local optimum
/// (for example, merge behind or overtake) the closed loop follows.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "strategy", rename_all = "snake_case"))]
pub enum ColdStart {
    /// Every decision variable starts at zero.
    Zero,
    /// A constant input, clamped to the input box, with the states rolled
    /// out from the current state.
    Rollout { input: [f64; 2] },
}

impl Default for ColdStart {
    fn default() -> Self {
        ColdStart::Rollout { input: [0.0; 2] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CertificateParams {
    pub gamma_v: f64,
    pub gamma_d: f64,
    /// Lower bound on the smoothed relative velocity at stage `N − 1`.
    pub dv_min: f64,
}

impl CertificateParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |g: f64| g > 0.0 && g <= 1.0;
        if !unit(self.gamma_v) || !unit(self.gamma_d) {
            return Err(Error::InvalidParameter("gamma_v and gamma_d must lie in (0, 1]"));
        }
        if !self.dv_min.is_finite() {
            return Err(Error::InvalidParameter("dv_min must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OcpConfig {
    pub horizon: usize,
    /// Diagonal of the stage state weight over `(s1, v1, s2, v2)`.
    pub q: [f64; 4],
    pub q_n: [f64; 4],
    pub r: [f64; 2],
    pub v_refs: [f64; 2],
    /// Per-agent `[lower, upper]` acceleration bounds.
    pub input_bounds: [[f64; 2]; 2],
    pub dynamics: DiscreteDynamics,
    pub safety: SafetyParams,
    pub cert: CertificateParams,
    pub mode: Mode,
    pub cold_start: ColdStart,
    pub solver: SolveOptions,
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be positive"));
        }
        if self.mode == Mode::Certified && self.horizon < 3 {
            return Err(Error::InvalidConfig("certified mode needs a horizon of at least 3"));
        }
        let weights = self.q.iter().chain(&self.q_n).chain(&self.r);
        if weights.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("weights must be finite and nonnegative"));
        }
        for [lo, hi] in self.input_bounds {
            if !(lo <= 0.0 && 0.0 <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidConfig("input bounds must be finite and bracket zero"));
            }
        }
        if self.v_refs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("reference velocities must be finite"));
        }
        self.safety.validate()?;
        self.cert.validate()
    }

    pub fn n_vars(&self) -> usize {
        6 * self.horizon
    }

    fn x_ref(&self) -> [f64; 4] {
        [0.0, self.v_refs[0], 0.0, self.v_refs[1]]
    }

    /// `(tracking, actuation)` parts of the stage cost.
    pub fn stage_cost_split(&self, x: &[f64; 4], u: &[f64; 2]) -> (f64, f64) {
        let xr = self.x_ref();
        let tracking = (0..4).map(|i| self.q[i] * (x[i] - xr[i]) * (x[i] - xr[i])).sum();
        let actuation = (0..2).map(|i| self.r[i] * u[i] * u[i]).sum();
        (tracking, actuation)
    }
}

/// Which inequality a row of the transcription represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `h_d(x_j; p0) ≥ 0`.
    Distance {
        stage: usize,
    },
    /// `H_d(x_j) ≥ 0`.
    RelaxedDistance {
        stage: usize,
    },
    /// `h_d(x_j; pN) ≥ 0`.
    TerminalDistance {
        stage: usize,
    },
    VelocityLower {
        stage: usize,
        agent: usize,
    },
    VelocityUpper {
        stage: usize,
        agent: usize,
    },
    /// `h_d(x_N; pN) ≥ (1 − γ_d) h_d(x_{N−1}; pN)`.
    DistanceCertificate,
    VelocityLowerCertificate {
        agent: usize,
    },
    VelocityUpperCertificate {
        agent: usize,
    },
    /// `Δv(x_j) ≥ Δv̲`.
    RelativeVelocity {
        stage: usize,
    },
}

/// The transcribed OCP for one receding-horizon step.
#[derive(Clone, Debug)]
pub struct OcpProblem {
    pub cfg: OcpConfig,
    pub x0: [f64; 4],
    pub constraints: Vec<ConstraintKind>,
}

pub fn build_baseline(cfg: &OcpConfig, x_k: &LumpedState) -> Result<OcpProblem> {
    if cfg.mode != Mode::Baseline {
        return Err(Error::InvalidConfig("build_baseline needs mode = baseline"));
    }
    cfg.validate()?;
    let n = cfg.horizon;
    let mut c = Vec::new();
    for j in 1..=n {
        push_velocity_bounds(&mut c, j);
        c.push(ConstraintKind::Distance { stage: j });
    }
    Ok(OcpProblem {
        cfg: cfg.clone(),
        x0: x_k.to_array(),
        constraints: c,
    })
}

pub fn build_certified(cfg: &OcpConfig, x_k: &LumpedState) -> Result<OcpProblem> {
    if cfg.mode != Mode::Certified {
        return Err(Error::InvalidConfig("build_certified needs mode = certified"));
    }
    cfg.validate()?;
    let n = cfg.horizon;
    let mut c = Vec::new();
    for j in 1..=n - 2 {
        c.push(ConstraintKind::RelaxedDistance { stage: j });
    }
    c.push(ConstraintKind::TerminalDistance { stage: n - 1 });
    for j in 1..n {
        push_velocity_bounds(&mut c, j);
    }
    c.push(ConstraintKind::DistanceCertificate);
    for agent in [1, 2] {
        c.push(ConstraintKind::VelocityLowerCertificate { agent });
        c.push(ConstraintKind::VelocityUpperCertificate { agent });
    }
    c.push(ConstraintKind::RelativeVelocity { stage: n - 1 });
    Ok(OcpProblem {
        cfg: cfg.clone(),
        x0: x_k.to_array(),
        constraints: c,
    })
}

/// Builds the OCP matching `cfg.mode`.
pub fn build(cfg: &OcpConfig, x_k: &LumpedState) -> Result<OcpProblem> {
    match cfg.mode {
        Mode::Baseline => build_baseline(cfg, x_k),
        Mode::Certified => build_certified(cfg, x_k),
    }
}

fn push_velocity_bounds(c: &mut Vec<ConstraintKind>, stage: usize) {
    for agent in [1, 2] {
        c.push(ConstraintKind::VelocityLower { stage, agent });
        c.push(ConstraintKind::VelocityUpper { stage, agent });
    }
}

fn vel(agent: usize) -> usize {
    if agent == 1 {
        1
    } else {
        3
    }
}

impl OcpProblem {
    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn u_offset(j: usize) -> usize {
        2 * j
    }

    fn x_offset(&self, j: usize) -> usize {
        debug_assert!(j >= 1);
        2 * self.cfg.horizon + 4 * (j - 1)
    }

    pub fn input(&self, z: &[f64], j: usize) -> [f64; 2] {
        let o = Self::u_offset(j);
        [z[o], z[o + 1]]
    }

    /// State `x_j`, with `x_0` the fixed initial state.
    pub fn state(&self, z: &[f64], j: usize) -> [f64; 4] {
        if j == 0 {
            return self.x0;
        }
        let o = self.x_offset(j);
        [z[o], z[o + 1], z[o + 2], z[o + 3]]
    }

    /// Value of one inequality row at the stage states, generic over the arithmetic.
    pub fn constraint_value<T: Scalar>(&self, kind: ConstraintKind, xa: &[T; 4], xb: &[T; 4]) -> T {
        let sp = &self.cfg.safety;
        let (gd, gv) = (self.cfg.cert.gamma_d, self.cfg.cert.gamma_v);
        match kind {
            ConstraintKind::Distance { .. } => h_d(xa, &sp.p0, sp),
            ConstraintKind::RelaxedDistance { .. } => relaxed_h_d(xa, sp),
            ConstraintKind::TerminalDistance { .. } => h_d(xa, &sp.p_n, sp),
            ConstraintKind::VelocityLower { agent, .. } => xa[vel(agent)],
            ConstraintKind::VelocityUpper { agent, .. } => -xa[vel(agent)] + sp.v_max,
            ConstraintKind::DistanceCertificate => h_d(xb, &sp.p_n, sp) - h_d(xa, &sp.p_n, sp) * (1.0 - gd),
            ConstraintKind::VelocityLowerCertificate { agent } => xb[vel(agent)] - xa[vel(agent)] * (1.0 - gv),
            ConstraintKind::VelocityUpperCertificate { agent } => {
                (-xb[vel(agent)] + sp.v_max) - (-xa[vel(agent)] + sp.v_max) * (1.0 - gv)
            }
            ConstraintKind::RelativeVelocity { .. } => delta_v(xa, sp.m_lf) - self.cfg.cert.dv_min,
        }
    }

    /// Stages `(a, b)` a row depends on; `b` is only used by certificates.
    fn stages(&self, kind: ConstraintKind) -> (usize, Option<usize>) {
        let n = self.cfg.horizon;
        match kind {
            ConstraintKind::Distance { stage }
            | ConstraintKind::RelaxedDistance { stage }
            | ConstraintKind::TerminalDistance { stage }
            | ConstraintKind::VelocityLower { stage, .. }
            | ConstraintKind::VelocityUpper { stage, .. }
            | ConstraintKind::RelativeVelocity { stage } => (stage, None),
            ConstraintKind::DistanceCertificate
            | ConstraintKind::VelocityLowerCertificate { .. }
            | ConstraintKind::VelocityUpperCertificate { .. } => (n - 1, Some(n)),
        }
    }

    /// Constraint rows evaluated directly on a stage trajectory `x_0..x_N`.
    pub fn constraints_on_trajectory(&self, xs: &[[f64; 4]]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|&k| {
                let (a, b) = self.stages(k);
                self.constraint_value(k, &xs[a], &xs[b.unwrap_or(a)])
            })
            .collect()
    }

    /// States `x_0..x_N` from the decision vector.
    pub fn states(&self, z: &[f64]) -> Vec<[f64; 4]> {
        (0..=self.cfg.horizon).map(|j| self.state(z, j)).collect()
    }

    pub fn inputs(&self, z: &[f64]) -> Vec<[f64; 2]> {
        (0..self.cfg.horizon).map(|j| self.input(z, j)).collect()
    }

    /// Decision vector of `inputs` rolled out from `x0` (zero defects).
    pub fn rollout(&self, inputs: &[[f64; 2]]) -> Vec<f64> {
        let mut z = vec![0.0; self.cfg.n_vars()];
        let mut x = self.x0;
        for (j, u) in inputs.iter().enumerate() {
            z[2 * j] = u[0];
            z[2 * j + 1] = u[1];
            x = self.cfg.dynamics.step_array(&x, u);
            let o = self.x_offset(j + 1);
            z[o..o + 4].copy_from_slice(&x);
        }
        z
    }

    /// Cold-start guess per the configured strategy.
    pub fn cold_guess(&self, strategy: ColdStart) -> Vec<f64> {
        match strategy {
            ColdStart::Zero => vec![0.0; self.cfg.n_vars()],
            ColdStart::Rollout { input } => {
                let b = &self.cfg.input_bounds;
                let u = [input[0].clamp(b[0][0], b[0][1]), input[1].clamp(b[1][0], b[1][1])];
                self.rollout(&vec![u; self.cfg.horizon])
            }
        }
    }

    /// Previous solution advanced one stage, repeating the last input.
    pub fn shifted_guess(&self, previous: &[f64]) -> Vec<f64> {
        let n = self.cfg.horizon;
        let mut z = vec![0.0; self.cfg.n_vars()];
        for j in 0..n {
            let src = Self::u_offset((j + 1).min(n - 1));
            z[2 * j] = previous[src];
            z[2 * j + 1] = previous[src + 1];
        }
        for j in 1..n {
            let src = self.x_offset(j + 1);
            let dst = self.x_offset(j);
            z[dst..dst + 4].copy_from_slice(&previous[src..src + 4]);
        }
        let last = self.state(previous, n);
        let xn = self.cfg.dynamics.step_array(&last, &self.input(&z, n - 1));
        let o = self.x_offset(n);
        z[o..o + 4].copy_from_slice(&xn);
        z
    }

    /// Dynamics defects `x_{j+1} − f(x_j, u_j)` for `j = 0..N−1`.
    pub fn defects(&self, z: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; 4 * self.cfg.horizon];
        self.eq_constraints(z, &mut c, None);
        c
    }
}

impl NlpProblem for OcpProblem {
    fn dims(&self) -> NlpDims {
        let n = self.cfg.horizon;
        NlpDims {
            n: 6 * n,
            m_eq: 4 * n,
            m_in: self.constraints.len(),
        }
    }

    fn objective(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let cfg = &self.cfg;
        let n = cfg.horizon;
        let xr = cfg.x_ref();
        let mut f = 0.0;
        let mut g = grad;
        for j in 0..n {
            let u = self.input(z, j);
            for i in 0..2 {
                f += cfg.r[i] * u[i] * u[i];
                if let Some(g) = g.as_deref_mut() {
                    g[2 * j + i] = 2.0 * cfg.r[i] * u[i];
                }
            }
        }
        for j in 0..=n {
            let x = self.state(z, j);
            let w = if j == n { &cfg.q_n } else { &cfg.q };
            for i in 0..4 {
                let e = x[i] - xr[i];
                f += w[i] * e * e;
                if j > 0 {
                    if let Some(g) = g.as_deref_mut() {
                        g[self.x_offset(j) + i] = 2.0 * w[i] * e;
                    }
                }
            }
        }
        f
    }

    fn eq_constraints(&self, z: &[f64], c: &mut [f64], jac: Option<&mut DMatrix<f64>>) {
        let dy: &DiscreteDynamics = &self.cfg.dynamics;
        let n = self.cfg.horizon;
        for j in 0..n {
            let x = self.state(z, j);
            let next = dy.step_array(&x, &self.input(z, j));
            let xn = self.state(z, j + 1);
            for i in 0..4 {
                c[4 * j + i] = xn[i] - next[i];
            }
        }
        if let Some(jac) = jac {
            for j in 0..n {
                let row = 4 * j;
                let xo = self.x_offset(j + 1);
                for i in 0..4 {
                    jac[(row + i, xo + i)] = 1.0;
                }
                // −∂f/∂u_j
                let uo = Self::u_offset(j);
                jac[(row, uo)] = -dy.b[0];
                jac[(row + 1, uo)] = -dy.b[1];
                jac[(row + 2, uo + 1)] = -dy.b[0];
                jac[(row + 3, uo + 1)] = -dy.b[1];
                // −∂f/∂x_j
                if j > 0 {
                    let po = self.x_offset(j);
                    for agent in 0..2 {
                        let (s, v) = (2 * agent, 2 * agent + 1);
                        jac[(row + s, po + s)] = -dy.a[0][0];
                        jac[(row + s, po + v)] = -dy.a[0][1];
                        jac[(row + v, po + v)] = -dy.a[1][1];
                    }
                }
            }
        }
    }

    fn ineq_constraints(&self, z: &[f64], c: &mut [f64], jac: Option<&mut DMatrix<f64>>) {
        match jac {
            None => {
                for (r, &k) in self.constraints.iter().enumerate() {
                    let (a, b) = self.stages(k);
                    let xa = self.state(z, a);
                    let xb = self.state(z, b.unwrap_or(a));
                    c[r] = self.constraint_value(k, &xa, &xb);
                }
            }
            Some(jac) => {
                for (r, &k) in self.constraints.iter().enumerate() {
                    let (a, b) = self.stages(k);
                    let xa = self.state(z, a);
                    let xb = self.state(z, b.unwrap_or(a));
                    let mut seed = [0.0; 8];
                    seed[..4].copy_from_slice(&xa);
                    seed[4..].copy_from_slice(&xb);
                    let d = Dual::<f64, 8>::seed(seed);
                    let da = [d[0], d[1], d[2], d[3]];
                    let db = [d[4], d[5], d[6], d[7]];
                    let v = self.constraint_value(k, &da, &db);
                    c[r] = v.value;
                    if a > 0 {
                        let o = self.x_offset(a);
                        for i in 0..4 {
                            jac[(r, o + i)] += v.partials[i];
                        }
                    }
                    if let Some(b) = b {
                        let o = self.x_offset(b);
                        for i in 0..4 {
                            jac[(r, o + i)] += v.partials[4 + i];
                        }
                    }
                }
            }
        }
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.cfg.horizon;
        let mut lo = vec![f64::NEG_INFINITY; 6 * n];
        let mut hi = vec![f64::INFINITY; 6 * n];
        for j in 0..n {
            for i in 0..2 {
                lo[2 * j + i] = self.cfg.input_bounds[i][0];
                hi[2 * j + i] = self.cfg.input_bounds[i][1];
            }
        }
        (lo, hi)
    }

    fn hessian_guess(&self) -> DMatrix<f64> {
        let n = self.cfg.horizon;
        let mut h = DMatrix::zeros(6 * n, 6 * n);
        for j in 0..n {
            for i in 0..2 {
                h[(2 * j + i, 2 * j + i)] = 2.0 * self.cfg.r[i];
            }
        }
        for j in 1..=n {
            let w = if j == n { &self.cfg.q_n } else { &self.cfg.q };
            let o = self.x_offset(j);
            for i in 0..4 {
                h[(o + i, o + i)] = 2.0 * w[i];
            }
        }
        h
    }
}

/// One receding-horizon step: builds the OCP at `x_k`, solves it from the
/// shifted previous solution (or a cold start) and returns the first input.
///
/// A failed solve is retried from the configured cold start, then from the
/// zero-input rollout and the all-zero guess, before the failure is reported.
pub fn mpc_step(cfg: &OcpConfig, x_k: &LumpedState, warm: Option<&SolveResult>) -> Result<(ControlInput, SolveResult)> {
    let problem = build(cfg, x_k)?;
    let mut guesses: Vec<(Vec<f64>, Option<&nlp::Multipliers>)> = Vec::new();
    if let Some(w) = warm {
        if w.z_star.len() == cfg.n_vars() {
            guesses.push((problem.shifted_guess(&w.z_star), Some(&w.multipliers)));
        }
    }
    let mut starts = vec![cfg.cold_start];
    for fallback in [ColdStart::default(), ColdStart::Zero] {
        if !starts.contains(&fallback) {
            starts.push(fallback);
        }
    }
    for s in starts {
        guesses.push((problem.cold_guess(s), None));
    }

    let mut last: Option<SolveResult> = None;
    let mut iterations = 0;
    for (z0, mult) in guesses {
        let mut r = nlp::solve(&problem, &z0, mult, &cfg.solver)?;
        iterations += r.iterations;
        r.iterations = iterations;
        if acceptable(&r, cfg) {
            let u = problem.input(&r.z_star, 0);
            return Ok((ControlInput::from_array(u), r));
        }
        last = Some(r);
    }
    match last.map(|r| r.status) {
        Some(SolveStatus::InfeasibleDetected) => Err(Error::Infeasible),
        _ => Err(Error::MaxIterations),
    }
}

/// Converged, or stopped at the iteration cap on a feasible point.
fn acceptable(r: &SolveResult, cfg: &OcpConfig) -> bool {
    match r.status {
        SolveStatus::Converged => true,
        SolveStatus::MaxIter => r.kkt_residual.feasibility <= cfg.solver.kkt_tol,
        SolveStatus::InfeasibleDetected => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::zoh_discretize;
    use crate::safety::ActivationParams;

    pub(crate) fn scenario1_cfg(mode: Mode) -> OcpConfig {
        OcpConfig {
            horizon: 15,
            q: [0.0, 10.0, 0.0, 10.0],
            q_n: [0.0, 10.0, 0.0, 10.0],
            r: [1.0, 1.0],
            v_refs: [13.0, 12.5],
            input_bounds: [[-3.0, 3.0], [-3.0, 3.0]],
            dynamics: zoh_discretize(0.1).unwrap(),
            safety: SafetyParams {
                d0: 5.0,
                t_h: 1.0,
                m_lf: 10.0,
                p0: ActivationParams::new(0.4, -45.0),
                p_n: ActivationParams::new(0.06, -75.0),
                eps_d: 0.0025,
                v_max: 15.0,
            },
            cert: CertificateParams {
                gamma_v: 0.8,
                gamma_d: 0.15,
                dv_min: 0.01,
            },
            mode,
            cold_start: ColdStart::default(),
            solver: SolveOptions::default(),
        }
    }

    fn x_s1() -> LumpedState {
        LumpedState::new(-165.0, 13.0, -160.0, 12.5)
    }

    #[test]
    fn baseline_has_ninety_variables_for_n15() {
        let p = build_baseline(&scenario1_cfg(Mode::Baseline), &x_s1()).unwrap();
        assert_eq!(p.dims().n, 90);
        assert_eq!(p.dims().m_eq, 60);
        assert_eq!(p.dims().m_in, 15 * 5);
    }

    #[test]
    fn certified_index_ranges() {
        let mut cfg = scenario1_cfg(Mode::Certified);
        cfg.horizon = 3;
        let p = build_certified(&cfg, &x_s1()).unwrap();
        let relaxed: Vec<_> = p
            .constraints
            .iter()
            .filter_map(|k| match k {
                ConstraintKind::RelaxedDistance { stage } => Some(*stage),
                _ => None,
            })
            .collect();
        assert_eq!(relaxed, vec![1]);
        assert!(p.constraints.contains(&ConstraintKind::TerminalDistance { stage: 2 }));
        assert!(p.constraints.contains(&ConstraintKind::RelativeVelocity { stage: 2 }));
        cfg.horizon = 2;
        assert!(build_certified(&cfg, &x_s1()).is_err());
    }

    #[test]
    fn mode_mismatch_and_bad_bounds_rejected() {
        assert!(build_baseline(&scenario1_cfg(Mode::Certified), &x_s1()).is_err());
        let mut cfg = scenario1_cfg(Mode::Certified);
        cfg.input_bounds[0] = [0.5, 3.0];
        assert!(build_certified(&cfg, &x_s1()).is_err());
        let mut cfg = scenario1_cfg(Mode::Certified);
        cfg.cert.gamma_d = 0.0;
        assert!(build_certified(&cfg, &x_s1()).is_err());
    }

    #[test]
    fn gamma_one_certificate_is_plain_barrier() {
        let mut cfg = scenario1_cfg(Mode::Certified);
        cfg.cert.gamma_d = 1.0;
        let p = build_certified(&cfg, &x_s1()).unwrap();
        let xa = [-60.0, 12.0, -70.0, 13.0];
        let xb = [-58.0, 12.0, -69.0, 13.0];
        let v = p.constraint_value(ConstraintKind::DistanceCertificate, &xa, &xb);
        assert_eq!(v, h_d(&xb, &cfg.safety.p_n, &cfg.safety));
    }

    #[test]
    fn rollout_objective_is_pure_tracking_cost() {
        let cfg = scenario1_cfg(Mode::Baseline);
        let p = build_baseline(&cfg, &x_s1()).unwrap();
        let z = p.rollout(&vec![[0.0; 2]; 15]);
        assert!(p.defects(&z).iter().all(|d| *d == 0.0));
        let xs = p.states(&z);
        let expect: f64 = xs
            .iter()
            .enumerate()
            .map(|(j, x)| {
                let w = if j == 15 { cfg.q_n } else { cfg.q };
                w[1] * (x[1] - 13.0).powi(2) + w[3] * (x[3] - 12.5).powi(2)
            })
            .sum();
        assert!((p.objective(&z, None) - expect).abs() < 1e-12);
    }

    #[test]
    fn pure_actuation_penalty_gives_zero_input() {
        let mut cfg = scenario1_cfg(Mode::Baseline);
        cfg.q = [0.0; 4];
        cfg.q_n = [0.0; 4];
        let (u, r) = mpc_step(&cfg, &x_s1(), None).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        assert!(u.inf_norm() < 1e-6, "{u:?}");
    }

    #[test]
    fn transcription_matches_direct_evaluation() {
        let cfg = scenario1_cfg(Mode::Certified);
        let p = build_certified(&cfg, &x_s1()).unwrap();
        let mut seed = 7u64;
        let mut rnd = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..20 {
            let inputs: Vec<[f64; 2]> = (0..15).map(|_| [3.0 * rnd(), 3.0 * rnd()]).collect();
            let z = p.rollout(&inputs);
            let mut c = vec![0.0; p.dims().m_in];
            let mut jac = DMatrix::zeros(p.dims().m_in, p.dims().n);
            p.ineq_constraints(&z, &mut c, Some(&mut jac));
            let mut xs = vec![p.x0];
            for u in &inputs {
                let next = cfg.dynamics.step_array(xs.last().unwrap(), u);
                xs.push(next);
            }
            let direct = p.constraints_on_trajectory(&xs);
            for (a, b) in c.iter().zip(&direct) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let cfg = scenario1_cfg(Mode::Certified);
        let p = build_certified(&cfg, &LumpedState::new(-60.0, 12.0, -64.0, 13.0)).unwrap();
        let inputs: Vec<[f64; 2]> = (0..15).map(|j| [0.1 * j as f64 - 0.7, 0.5 - 0.05 * j as f64]).collect();
        let z = p.rollout(&inputs);
        let d = p.dims();
        let mut c = vec![0.0; d.m_in];
        let mut jac = DMatrix::zeros(d.m_in, d.n);
        p.ineq_constraints(&z, &mut c, Some(&mut jac));
        let mut ce = vec![0.0; d.m_eq];
        let mut je = DMatrix::zeros(d.m_eq, d.n);
        p.eq_constraints(&z, &mut ce, Some(&mut je));
        let mut g = vec![0.0; d.n];
        p.objective(&z, Some(&mut g));
        for k in 0..d.n {
            let h = 1e-6 * (1.0 + z[k].abs());
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[k] += h;
            zm[k] -= h;
            let (mut cp, mut cm) = (vec![0.0; d.m_in], vec![0.0; d.m_in]);
            p.ineq_constraints(&zp, &mut cp, None);
            p.ineq_constraints(&zm, &mut cm, None);
            for r in 0..d.m_in {
                let fd = (cp[r] - cm[r]) / (2.0 * h);
                assert!(
                    (fd - jac[(r, k)]).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "row {r} col {k}: {fd} vs {}",
                    jac[(r, k)]
                );
            }
            let (mut ep, mut em) = (vec![0.0; d.m_eq], vec![0.0; d.m_eq]);
            p.eq_constraints(&zp, &mut ep, None);
            p.eq_constraints(&zm, &mut em, None);
            for r in 0..d.m_eq {
                let fd = (ep[r] - em[r]) / (2.0 * h);
                assert!((fd - je[(r, k)]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
            let fd = (p.objective(&zp, None) - p.objective(&zm, None)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn shifted_guess_has_zero_defects() {
        let cfg = scenario1_cfg(Mode::Certified);
        let p = build_certified(&cfg, &x_s1()).unwrap();
        let inputs: Vec<[f64; 2]> = (0..15).map(|j| [0.2 * (j % 3) as f64, -0.1 * j as f64]).collect();
        let z = p.rollout(&inputs);
        let x1 = LumpedState::from_array(p.state(&z, 1));
        let next = build_certified(&cfg, &x1).unwrap();
        let shifted = next.shifted_guess(&z);
        assert!(next.defects(&shifted).iter().all(|d| *d == 0.0));
        assert_eq!(next.input(&shifted, 14), inputs[14]);
    }

    #[test]
    fn stationary_far_from_merge_needs_no_input() {
        let mut cfg = scenario1_cfg(Mode::Certified);
        // The leader is faster so the relative-velocity bound is inactive.
        cfg.v_refs = [12.0, 12.5];
        let x = LumpedState::new(-240.0, 12.0, -200.0, 12.5);
        let (u, r) = mpc_step(&cfg, &x, None).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        assert!(u.inf_norm() < 1e-4, "{u:?}");
    }

    #[test]
    fn scenario1_first_step_is_feasible_and_kkt() {
        let cfg = scenario1_cfg(Mode::Certified);
        let (_, r) = mpc_step(&cfg, &x_s1(), None).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        let p = build_certified(&cfg, &x_s1()).unwrap();
        let mut c = vec![0.0; p.dims().m_in];
        p.ineq_constraints(&r.z_star, &mut c, None);
        assert!(c.iter().all(|v| *v >= -1e-6));
        assert!(nlp::kkt_residual(&p, &r.z_star, &r.multipliers).within(1e-6));
    }
}
