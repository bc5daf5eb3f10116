//! Subcommand bodies. Each returns the process exit code and the files it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use cbf_mpc_core::certify::{
    least_input_bound, merge_reports, partition_domain, verify, BoundSearch, VerificationProblem,
};
use cbf_mpc_core::ocp::Mode;
use cbf_mpc_core::simloop::{
    audit_safety, cumulative_costs, detect_overtake, first_reaction, random_feasible_starts, run_scenario, Clock,
    CostSummary, Overtake, RunOutcome, SafetyAudit, TrajectoryLog, AUDIT_TOL, OVERTAKE_HYSTERESIS,
};
use cbf_mpc_core::{CertificateKind, StateBox, Verdict, VerificationReport, VerifierOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{exit, CliError};
use crate::output::{fmt_num, write_json, write_table, write_trajectory_csv, Cell};

/// Wall clock measured from construction.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Result of a subcommand.
#[derive(Debug)]
pub struct Finished {
    pub code: i32,
    pub outputs: Vec<PathBuf>,
}

/// Command-line overrides of config fields.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub cert: Option<CertificateKind>,
    pub tol: Option<f64>,
    pub budget: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut Config) {
        if let Some(m) = self.mode {
            cfg.ocp.mode = m;
        }
        if let Some(c) = self.cert {
            cfg.verifier.cert = c;
        }
        if let Some(t) = self.tol {
            cfg.verifier.options.tol = t;
        }
        if let Some(b) = self.budget {
            cfg.verifier.options.budget = b;
        }
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub scenario: String,
    pub mode: Mode,
    pub outcome: RunOutcome,
    pub steps: usize,
    pub costs: CostSummary,
    pub audit: SafetyAudit,
    pub overtake: Option<Overtake>,
    /// Whether the overtake happened before `s1` reached the lane-change point.
    pub overtake_before_lane_change: bool,
    /// First step with `|u|∞ > 0.1`.
    pub first_reaction: Option<usize>,
    /// Largest KKT residual component over the converged solves.
    pub max_kkt: f64,
    pub total_solve_time: f64,
}

pub fn summarize(cfg: &Config, log: &TrajectoryLog) -> SimulationSummary {
    let sp = cfg.safety_params();
    let overtake = detect_overtake(log, OVERTAKE_HYSTERESIS);
    SimulationSummary {
        scenario: cfg.scenario.name.clone(),
        mode: cfg.ocp.mode,
        outcome: log.outcome.clone(),
        steps: log.steps.len(),
        costs: cumulative_costs(log),
        audit: audit_safety(log, &sp, &cfg.ocp.input_bounds, AUDIT_TOL),
        overtake,
        overtake_before_lane_change: overtake.is_some_and(|o| o.s1 < cfg.scenario.s_lc),
        first_reaction: first_reaction(log, 0.1),
        max_kkt: log.steps.iter().map(|r| r.kkt.max()).fold(0.0, f64::max),
        total_solve_time: log.steps.iter().map(|r| r.solve_time).sum(),
    }
}

/// Exit code of a simulation: infeasibility beats a dirty audit.
pub fn simulation_exit(outcome: &RunOutcome, audit: &SafetyAudit) -> i32 {
    match outcome {
        RunOutcome::Infeasible { .. } | RunOutcome::SolverFailure { .. } => exit::INFEASIBLE,
        RunOutcome::Completed if !audit.clean() => exit::SAFETY_VIOLATION,
        RunOutcome::Completed => exit::OK,
    }
}

fn report_outcome(outcome: &RunOutcome) {
    match outcome {
        RunOutcome::Infeasible { step } => eprintln!("error: OCP infeasible at step {step}"),
        RunOutcome::SolverFailure { step } => {
            eprintln!("error: solver failed to reach a feasible point at step {step}")
        }
        RunOutcome::Completed => {}
    }
}

pub fn simulate(cfg: &Config, out: &Path) -> Result<Finished, CliError> {
    let sc = cfg.scenario_config()?;
    fs::create_dir_all(out)?;
    let log = run_scenario(&sc, &WallClock::new())?;
    let summary = summarize(cfg, &log);
    let csv = out.join("trajectory.csv");
    let json = out.join("summary.json");
    write_trajectory_csv(&csv, &log)?;
    write_json(&json, &summary)?;
    report_outcome(&log.outcome);
    if let Some(k) = summary.audit.first_violation {
        eprintln!("error: safety audit failed, first violation at state {k}");
    }
    println!(
        "{}: {} steps, outcome {:?}, min margin {} m, stage cost {}",
        summary.scenario,
        summary.steps,
        summary.outcome,
        fmt_num(summary.audit.min_margin),
        fmt_num(summary.costs.stage)
    );
    Ok(Finished {
        code: simulation_exit(&log.outcome, &summary.audit),
        outputs: vec![csv, json],
    })
}

/// Closed-loop runs from `count` random feasible starts.
pub fn simulate_batch(cfg: &Config, out: &Path, count: usize, jobs: usize) -> Result<Finished, CliError> {
    let sc = cfg.scenario_config()?;
    fs::create_dir_all(out)?;
    let starts = random_feasible_starts(&sc, &cfg.scenario.random_starts, count, sc.seed)?;
    let sp = cfg.safety_params();
    let runs: Vec<_> = pool(jobs)?.install(|| {
        starts
            .par_iter()
            .map(|x0| {
                let mut s = sc.clone();
                s.x0 = *x0;
                run_scenario(&s, &WallClock::new()).map(|log| {
                    let audit = audit_safety(&log, &sp, &s.ocp.input_bounds, AUDIT_TOL);
                    (*x0, log, audit)
                })
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut code = exit::OK;
    for (i, run) in runs.into_iter().enumerate() {
        let (x0, log, audit) = run?;
        let c = simulation_exit(&log.outcome, &audit);
        if code != exit::INFEASIBLE && c != exit::OK {
            code = c;
        }
        let failed_at = match log.outcome {
            RunOutcome::Infeasible { step } | RunOutcome::SolverFailure { step } => Cell::Int(step as u64),
            RunOutcome::Completed => Cell::Empty,
        };
        let x = x0.to_array();
        rows.push(vec![
            Cell::Int(i as u64),
            Cell::Num(x[0]),
            Cell::Num(x[1]),
            Cell::Num(x[2]),
            Cell::Num(x[3]),
            Cell::Int(log.steps.len() as u64),
            Cell::Text(outcome_name(&log.outcome).into()),
            failed_at,
            Cell::Num(audit.min_margin),
            Cell::Int(c as u64),
        ]);
    }
    let path = out.join("batch.csv");
    let header = [
        "run",
        "s1",
        "v1",
        "s2",
        "v2",
        "steps",
        "outcome",
        "failed_step",
        "min_margin",
        "exit_code",
    ];
    write_table(&path, &header, &rows)?;
    println!("{count} runs, worst exit code {code}");
    Ok(Finished {
        code,
        outputs: vec![path],
    })
}

fn outcome_name(o: &RunOutcome) -> &'static str {
    match o {
        RunOutcome::Completed => "completed",
        RunOutcome::Infeasible { .. } => "infeasible",
        RunOutcome::SolverFailure { .. } => "solver_failure",
    }
}

/// Runs the verifier on `jobs` slabs of `domain` in parallel, each with an
/// equal share of the node budget. The first counterexample cancels the rest.
pub fn verify_parallel(
    kind: CertificateKind,
    vp: &VerificationProblem,
    domain: &StateBox,
    opts: &VerifierOptions,
    jobs: usize,
) -> Result<VerificationReport, CliError> {
    let clock = WallClock::new();
    if jobs <= 1 {
        return Ok(verify(kind, vp, domain, opts, &clock, None)?);
    }
    let parts = partition_domain(domain, jobs);
    let share = VerifierOptions {
        budget: opts.budget.div_ceil(jobs as u64),
        ..*opts
    };
    let cancel = AtomicBool::new(false);
    let reports: Vec<_> = pool(jobs)?.install(|| {
        parts
            .par_iter()
            .map(|b| {
                let r = verify(kind, vp, b, &share, &clock, Some(&cancel));
                if r.as_ref().is_ok_and(|r| r.verdict == Verdict::Falsified) {
                    cancel.store(true, Ordering::Relaxed);
                }
                r
            })
            .collect()
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut merged = merge_reports(domain, reports).expect("at least one part");
    merged.wall_time = clock.now();
    Ok(merged)
}

pub fn verdict_exit(v: Verdict) -> i32 {
    match v {
        Verdict::Certified => exit::OK,
        Verdict::Falsified => exit::FALSIFIED,
        Verdict::Inconclusive => exit::INCONCLUSIVE,
    }
}

pub fn cmd_verify(cfg: &Config, out: &Path, jobs: usize) -> Result<Finished, CliError> {
    let vp = cfg.verification_problem()?;
    let domain = cfg.domain()?;
    let opts = cfg.verifier_options()?;
    fs::create_dir_all(out)?;
    let report = verify_parallel(cfg.verifier.cert, &vp, &domain, &opts, jobs)?;
    let path = out.join("verification.json");
    write_json(&path, &report)?;
    println!(
        "{:?} {:?}: {} nodes in {} s",
        report.kind,
        report.verdict,
        report.nodes_explored,
        fmt_num(report.wall_time)
    );
    if let Some(x) = report.counterexample {
        println!(
            "counterexample {:?} with gap {}",
            x.to_array(),
            fmt_num(report.counterexample_gap.unwrap_or(f64::NAN))
        );
    }
    Ok(Finished {
        code: verdict_exit(report.verdict),
        outputs: vec![path],
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostRow {
    pub horizon: usize,
    pub gamma_d: f64,
    pub outcome: RunOutcome,
    pub steps: usize,
    pub costs: CostSummary,
}

/// Closed-loop cumulative costs over every `(horizon, γ_d)` pair.
pub fn cost_grid(base: &Config, horizons: &[usize], gammas: &[f64], jobs: usize) -> Result<Vec<CostRow>, CliError> {
    let grid: Vec<(usize, f64)> = horizons
        .iter()
        .flat_map(|&n| gammas.iter().map(move |&g| (n, g)))
        .collect();
    let rows: Vec<_> = pool(jobs)?.install(|| {
        grid.par_iter()
            .map(|&(n, g)| {
                let mut c = base.clone();
                c.ocp.horizon = n;
                c.certificate.gamma_d = g;
                let log = run_scenario(&c.scenario_config()?, &WallClock::new())?;
                Ok(CostRow {
                    horizon: n,
                    gamma_d: g,
                    outcome: log.outcome.clone(),
                    steps: log.steps.len(),
                    costs: cumulative_costs(&log),
                })
            })
            .collect()
    });
    rows.into_iter().collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundRow {
    pub cert: CertificateKind,
    pub gamma_d: f64,
    /// `None` when the bracket did not hold.
    pub search: Option<BoundSearch>,
    pub error: Option<String>,
    pub wall_time: f64,
}

/// Least symmetric input bound for every `(certificate, γ_d)` pair.
pub fn bound_grid(
    base: &Config,
    certs: &[CertificateKind],
    gammas: &[f64],
    jobs: usize,
) -> Result<Vec<BoundRow>, CliError> {
    let grid: Vec<(CertificateKind, f64)> = certs
        .iter()
        .flat_map(|&k| gammas.iter().map(move |&g| (k, g)))
        .collect();
    let bracket = (base.verifier.bracket[0], base.verifier.bracket[1]);
    let tol = base.verifier.bisect_tol;
    let opts = base.verifier_options()?;
    let rows: Vec<_> = pool(jobs)?.install(|| {
        grid.par_iter()
            .map(|&(kind, g)| {
                let mut c = base.clone();
                c.certificate.gamma_d = g;
                let vp = c.verification_problem()?;
                let domain = c.domain()?;
                let clock = WallClock::new();
                let res = least_input_bound(kind, &vp, &domain, bracket, tol, &opts, &clock);
                Ok(BoundRow {
                    cert: kind,
                    gamma_d: g,
                    error: res.as_ref().err().map(|e| e.to_string()),
                    search: res.ok(),
                    wall_time: clock.now(),
                })
            })
            .collect()
    });
    rows.into_iter().collect()
}

/// What `sweep` iterates over.
#[derive(Clone, Debug)]
pub enum SweepSpec {
    /// Closed-loop costs over `horizons × gammas`.
    Costs { horizons: Vec<usize>, gammas: Vec<f64> },
    /// Input-bound bisection over `certs × gammas`.
    Bounds {
        certs: Vec<CertificateKind>,
        gammas: Vec<f64>,
    },
}

pub fn sweep(cfg: &Config, spec: &SweepSpec, out: &Path, jobs: usize) -> Result<Finished, CliError> {
    let empty = match spec {
        SweepSpec::Costs { horizons, gammas } => horizons.is_empty() || gammas.is_empty(),
        SweepSpec::Bounds { certs, gammas } => certs.is_empty() || gammas.is_empty(),
    };
    if empty {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    fs::create_dir_all(out)?;
    match spec {
        SweepSpec::Costs { horizons, gammas } => {
            let rows = cost_grid(cfg, horizons, gammas, jobs)?;
            let mut code = exit::OK;
            let table: Vec<Vec<Cell>> = rows
                .iter()
                .map(|r| {
                    if r.outcome != RunOutcome::Completed {
                        code = exit::INFEASIBLE;
                    }
                    vec![
                        Cell::Int(r.horizon as u64),
                        Cell::Num(r.gamma_d),
                        Cell::Text(outcome_name(&r.outcome).into()),
                        Cell::Int(r.steps as u64),
                        Cell::Num(r.costs.tracking),
                        Cell::Num(r.costs.actuation),
                        Cell::Num(r.costs.stage),
                    ]
                })
                .collect();
            let path = out.join("costs.csv");
            let header = [
                "horizon",
                "gamma_d",
                "outcome",
                "steps",
                "tracking_cost",
                "actuation_cost",
                "stage_cost",
            ];
            write_table(&path, &header, &table)?;
            Ok(Finished {
                code,
                outputs: vec![path],
            })
        }
        SweepSpec::Bounds { certs, gammas } => {
            let rows = bound_grid(cfg, certs, gammas, jobs)?;
            let mut code = exit::OK;
            let table: Vec<Vec<Cell>> = rows
                .iter()
                .map(|r| {
                    let cert = Cell::Text(cert_name(r.cert).into());
                    match (&r.search, &r.error) {
                        (Some(s), _) => vec![
                            cert,
                            Cell::Num(r.gamma_d),
                            Cell::Num(s.bound),
                            Cell::Num(s.lower),
                            Cell::Num(s.upper),
                            Cell::Int(s.trials.len() as u64),
                            Cell::Num(r.wall_time),
                            Cell::Empty,
                        ],
                        (None, e) => {
                            code = exit::INCONCLUSIVE;
                            let mut row = vec![cert, Cell::Num(r.gamma_d)];
                            row.extend([Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty]);
                            row.push(Cell::Num(r.wall_time));
                            row.push(Cell::Text(e.clone().unwrap_or_default()));
                            row
                        }
                    }
                })
                .collect();
            let path = out.join("bounds.csv");
            let header = [
                "cert",
                "gamma_d",
                "bound",
                "lower",
                "upper",
                "trials",
                "wall_time",
                "error",
            ];
            write_table(&path, &header, &table)?;
            Ok(Finished {
                code,
                outputs: vec![path],
            })
        }
    }
}

pub fn cert_name(k: CertificateKind) -> &'static str {
    match k {
        CertificateKind::Dtcbf => "dtcbf",
        CertificateKind::Qdtcbf => "qdtcbf",
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostReport {
    pub source: String,
    pub steps: usize,
    pub costs: CostSummary,
}

/// Cumulative costs from an existing trajectory CSV, or from a fresh run.
pub fn costs(cfg: &Config, log_csv: Option<&Path>, out: &Path) -> Result<Finished, CliError> {
    let (report, code) = match log_csv {
        Some(p) => {
            let (costs, steps) = crate::output::costs_from_csv(p)?;
            let source = p.display().to_string();
            (CostReport { source, steps, costs }, exit::OK)
        }
        None => {
            let sc = cfg.scenario_config()?;
            let log = run_scenario(&sc, &WallClock::new())?;
            report_outcome(&log.outcome);
            let code = if log.feasible() { exit::OK } else { exit::INFEASIBLE };
            let report = CostReport {
                source: sc.name,
                steps: log.steps.len(),
                costs: cumulative_costs(&log),
            };
            (report, code)
        }
    };
    fs::create_dir_all(out)?;
    let path = out.join("costs.json");
    write_json(&path, &report)?;
    println!(
        "tracking {} actuation {} stage {} over {} steps",
        fmt_num(report.costs.tracking),
        fmt_num(report.costs.actuation),
        fmt_num(report.costs.stage),
        report.steps
    );
    Ok(Finished {
        code,
        outputs: vec![path],
    })
}
