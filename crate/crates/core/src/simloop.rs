//! Closed-loop simulation with cost accounting and safety auditing.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{ControlInput, LumpedState};
use crate::error::{Error, Result};
use crate::nlp::{KktResidual, SolveResult, SolveStatus};
use crate::ocp::{mpc_step, Mode, OcpConfig};
use crate::safety::{min_safety_distance, SafetyParams};

/// Monotone wall-clock source in seconds.
pub trait Clock {
    fn now(&self) -> f64;
}

/// Clock that always reads zero, for `no_std` callers and tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScenarioConfig {
    pub name: String,
    pub x0: LumpedState,
    /// Simulated time [s].
    pub duration: f64,
    /// Lane-change point, used only for reporting.
    pub s_lc: f64,
    pub ocp: OcpConfig,
    /// Seed for randomized-start batches.
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn ts(&self) -> f64 {
        self.ocp.dynamics.ts
    }

    pub fn steps(&self) -> usize {
        libm::round(self.duration / self.ts()) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::InvalidConfig("duration must be positive"));
        }
        if !(self.ts() > 0.0) {
            return Err(Error::InvalidConfig("sample time must be positive"));
        }
        if !self.x0.is_finite() {
            return Err(Error::InvalidConfig("initial state must be finite"));
        }
        self.ocp.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub state: LumpedState,
    pub input: ControlInput,
    pub tracking_cost: f64,
    pub actuation_cost: f64,
    /// `|s1 − s2|`.
    pub distance: f64,
    /// Minimum safety distance `Lbar_d d_safe` at the state.
    pub min_distance: f64,
    /// Smallest of `v_i` and `v_max − v_i`.
    pub velocity_margin: f64,
    pub solve_iters: usize,
    pub solve_time: f64,
    pub status: SolveStatus,
    pub kkt: KktResidual,
}

impl StepRecord {
    pub fn distance_margin(&self) -> f64 {
        self.distance - self.min_distance
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum RunOutcome {
    Completed,
    /// The OCP was reported infeasible at `step`.
    Infeasible {
        step: usize,
    },
    /// The solver neither converged nor reached a feasible point at `step`.
    SolverFailure {
        step: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrajectoryLog {
    pub steps: Vec<StepRecord>,
    /// State after the last applied input.
    pub final_state: LumpedState,
    pub outcome: RunOutcome,
}

impl TrajectoryLog {
    pub fn feasible(&self) -> bool {
        self.outcome == RunOutcome::Completed
    }

    /// Every visited state, including the final one.
    pub fn states(&self) -> Vec<LumpedState> {
        let mut v: Vec<_> = self.steps.iter().map(|r| r.state).collect();
        v.push(self.final_state);
        v
    }
}

fn margins(x: &LumpedState, sp: &SafetyParams) -> (f64, f64, f64) {
    let a = x.to_array();
    let dist = x.distance();
    let min_d = min_safety_distance(&a, sp);
    let vm = [a[1], sp.v_max - a[1], a[3], sp.v_max - a[3]]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    (dist, min_d, vm)
}

/// Runs the closed loop for `sc.steps()` steps with plant = model.
pub fn run_scenario(sc: &ScenarioConfig, clock: &dyn Clock) -> Result<TrajectoryLog> {
    sc.validate()?;
    let cfg = &sc.ocp;
    let mut x = sc.x0;
    let mut warm: Option<SolveResult> = None;
    let mut steps = Vec::with_capacity(sc.steps());
    let mut outcome = RunOutcome::Completed;
    for k in 0..sc.steps() {
        let t0 = clock.now();
        let res = mpc_step(cfg, &x, warm.as_ref());
        let solve_time = clock.now() - t0;
        let (u, r) = match res {
            Ok(v) => v,
            Err(Error::Infeasible) => {
                outcome = RunOutcome::Infeasible { step: k };
                break;
            }
            Err(Error::MaxIterations) => {
                outcome = RunOutcome::SolverFailure { step: k };
                break;
            }
            Err(e) => return Err(e),
        };
        let (tracking, actuation) = cfg.stage_cost_split(&x.to_array(), &u.to_array());
        let (distance, min_distance, velocity_margin) = margins(&x, &cfg.safety);
        steps.push(StepRecord {
            k,
            t: k as f64 * sc.ts(),
            state: x,
            input: u,
            tracking_cost: tracking,
            actuation_cost: actuation,
            distance,
            min_distance,
            velocity_margin,
            solve_iters: r.iterations,
            solve_time,
            status: r.status,
            kkt: r.kkt_residual,
        });
        x = cfg.dynamics.step(&x, &u);
        warm = Some(r);
    }
    Ok(TrajectoryLog {
        steps,
        final_state: x,
        outcome,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostSummary {
    pub tracking: f64,
    pub actuation: f64,
    pub stage: f64,
}

/// Cumulative tracking, actuation and stage cost over the logged steps.
pub fn cumulative_costs(log: &TrajectoryLog) -> CostSummary {
    let tracking: f64 = log.steps.iter().map(|r| r.tracking_cost).sum();
    let actuation: f64 = log.steps.iter().map(|r| r.actuation_cost).sum();
    CostSummary {
        tracking,
        actuation,
        stage: tracking + actuation,
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SafetyAudit {
    /// Smallest `|s1 − s2| − d̄_s(x)` over all visited states.
    pub min_margin: f64,
    pub first_violation: Option<usize>,
    pub distance_violations: Vec<usize>,
    pub velocity_violations: Vec<usize>,
    pub input_violations: Vec<usize>,
}

impl SafetyAudit {
    pub fn clean(&self) -> bool {
        self.distance_violations.is_empty() && self.velocity_violations.is_empty() && self.input_violations.is_empty()
    }
}

pub const AUDIT_TOL: f64 = 1e-6;

/// Checks distance, velocity and input bounds at every visited state.
/// State index `steps.len()` refers to the final state.
pub fn audit_safety(log: &TrajectoryLog, sp: &SafetyParams, input_bounds: &[[f64; 2]; 2], tol: f64) -> SafetyAudit {
    let mut audit = SafetyAudit {
        min_margin: f64::INFINITY,
        first_violation: None,
        distance_violations: Vec::new(),
        velocity_violations: Vec::new(),
        input_violations: Vec::new(),
    };
    for (k, x) in log.states().iter().enumerate() {
        let (dist, min_d, vm) = margins(x, sp);
        let margin = dist - min_d;
        audit.min_margin = audit.min_margin.min(margin);
        if margin < -tol {
            audit.distance_violations.push(k);
        }
        if vm < -tol {
            audit.velocity_violations.push(k);
        }
    }
    for r in &log.steps {
        let u = r.input.to_array();
        if (0..2).any(|i| u[i] < input_bounds[i][0] - tol || u[i] > input_bounds[i][1] + tol) {
            audit.input_violations.push(r.k);
        }
    }
    audit.first_violation = [
        &audit.distance_violations,
        &audit.velocity_violations,
        &audit.input_violations,
    ]
    .iter()
    .filter_map(|v| v.first().copied())
    .min();
    audit
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Overtake {
    /// State index at which `s1 − s2` first exceeds `+hysteresis`.
    pub step: usize,
    pub s1: f64,
}

pub const OVERTAKE_HYSTERESIS: f64 = 0.1;

/// First change of `s1 − s2` from below `−hysteresis` to above `+hysteresis`.
pub fn detect_overtake(log: &TrajectoryLog, hysteresis: f64) -> Option<Overtake> {
    let mut behind = false;
    for (k, x) in log.states().iter().enumerate() {
        let gap = x.agent1.s - x.agent2.s;
        if gap < -hysteresis {
            behind = true;
        } else if gap > hysteresis && behind {
            return Some(Overtake {
                step: k,
                s1: x.agent1.s,
            });
        }
    }
    None
}

/// First step whose input exceeds `threshold` in the ∞-norm.
pub fn first_reaction(log: &TrajectoryLog, threshold: f64) -> Option<usize> {
    log.steps.iter().find(|r| r.input.inf_norm() > threshold).map(|r| r.k)
}

/// Sampling ranges for randomized-start batches.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct StartSampler {
    /// Range of `s1` [m].
    pub s1: [f64; 2],
    /// Range of `s1 − s2` [m].
    pub gap: [f64; 2],
    /// Range of both velocities [m/s]; the upper end is capped at `v_max`.
    pub velocity: [f64; 2],
    /// Candidates drawn per accepted start before giving up.
    pub max_tries: usize,
}

impl Default for StartSampler {
    fn default() -> Self {
        Self {
            s1: [-200.0, -100.0],
            gap: [-30.0, 30.0],
            velocity: [5.0, f64::INFINITY],
            max_tries: 1000,
        }
    }
}

/// Draws `count` initial states for which the first certified OCP solves,
/// deterministically from `seed`.
pub fn random_feasible_starts(
    base: &ScenarioConfig,
    sampler: &StartSampler,
    count: usize,
    seed: u64,
) -> Result<Vec<LumpedState>> {
    let mut cfg = base.ocp.clone();
    cfg.mode = Mode::Certified;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v_hi = sampler.velocity[1].min(cfg.safety.v_max);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        if tries >= sampler.max_tries * count.max(1) {
            return Err(Error::InvalidConfig(
                "no feasible start found within the sampling budget",
            ));
        }
        tries += 1;
        let s1 = rng.random_range(sampler.s1[0]..=sampler.s1[1]);
        let gap = rng.random_range(sampler.gap[0]..=sampler.gap[1]);
        let v1 = rng.random_range(sampler.velocity[0]..=v_hi);
        let v2 = rng.random_range(sampler.velocity[0]..=v_hi);
        let x = LumpedState::new(s1, v1, s1 - gap, v2);
        if mpc_step(&cfg, &x, None).is_ok() {
            out.push(x);
        }
    }
    Ok(out)
}
