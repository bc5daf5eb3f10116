//! Acceptance gate. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.
//!
//! Pass criterion numbers (`1` to `7`) as arguments to run a subset:
//! `cargo test -p cbf-mpc --test acceptance -- 1 2`.

use std::time::Instant;

use cbf_mpc::run::{bound_grid, WallClock};
use cbf_mpc::Config;
use cbf_mpc_core::certify::{two_step_gap, verify, VerificationProblem};
use cbf_mpc_core::nlp::SolveStatus;
use cbf_mpc_core::scenarios::default_s_lc;
use cbf_mpc_core::simloop::{
    audit_safety, cumulative_costs, detect_overtake, random_feasible_starts, run_scenario, RunOutcome, TrajectoryLog,
    AUDIT_TOL, OVERTAKE_HYSTERESIS,
};
use cbf_mpc_core::{eval_with_gradient, CertificateKind, FunctionId, Interval, LumpedState, Verdict, VerifierOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Gate {
    failed: Vec<u8>,
}

impl Gate {
    fn report(&mut self, id: u8, name: &str, pass: bool, detail: String, secs: f64) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {id} {name}: {detail} ({secs:.1} s)");
        if !pass {
            self.failed.push(id);
        }
    }
}

fn jobs() -> usize {
    std::env::var("CBF_MPC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Largest KKT residual over converged solves, and the number of steps that
/// were not converged.
fn kkt_stats(log: &TrajectoryLog) -> (f64, usize) {
    let worst = log
        .steps
        .iter()
        .filter(|r| r.status == SolveStatus::Converged)
        .map(|r| r.kkt.max())
        .fold(0.0, f64::max);
    let other = log.steps.iter().filter(|r| r.status != SolveStatus::Converged).count();
    (worst, other)
}

fn scenario_one(gate: &mut Gate, kkt: &mut Vec<(String, f64)>) -> Option<TrajectoryLog> {
    let t = Instant::now();
    let cfg = Config::default();
    let sc = cfg.scenario_config().expect("built-in config is valid");
    let log = run_scenario(&sc, &WallClock::new()).expect("scenario runs");
    let secs = t.elapsed().as_secs_f64();
    let audit = audit_safety(&log, &sc.ocp.safety, &sc.ocp.input_bounds, AUDIT_TOL);
    let states = log.states();
    let v_ok = states.iter().all(|x| {
        [x.agent1.v, x.agent2.v]
            .iter()
            .all(|v| *v >= -1e-6 && *v <= 15.0 + 1e-6)
    });
    let u_ok = log.steps.iter().all(|r| r.input.inf_norm() <= 3.0 + 1e-6);
    let pass = log.feasible() && log.steps.len() == 120 && audit.min_margin >= -1e-6 && v_ok && u_ok && secs <= 120.0;
    gate.report(
        1,
        "scenario-1 safety",
        pass,
        format!(
            "{} feasible steps, min margin {:.3e} m, velocities in bounds {v_ok}, inputs in bounds {u_ok}",
            log.steps.len(),
            audit.min_margin
        ),
        secs,
    );
    kkt.push(("scenario 1".into(), kkt_stats(&log).0));
    Some(log)
}

fn overtake(gate: &mut Gate, log: Option<&TrajectoryLog>) {
    let t = Instant::now();
    let owned;
    let log = match log {
        Some(l) => l,
        None => {
            let sc = Config::default().scenario_config().expect("valid");
            owned = run_scenario(&sc, &WallClock::new()).expect("scenario runs");
            &owned
        }
    };
    let s_lc = default_s_lc();
    let o = detect_overtake(log, OVERTAKE_HYSTERESIS);
    let pass = o.is_some_and(|o| o.s1 < s_lc);
    let detail = match o {
        Some(o) => format!(
            "s1 - s2 turns positive at step {} with s1 = {:.2} m < s_LC = {s_lc:.2} m",
            o.step, o.s1
        ),
        None => "no overtake".into(),
    };
    gate.report(
        2,
        "overtake before lane change",
        pass,
        detail,
        t.elapsed().as_secs_f64(),
    );
}

fn stage_costs(gate: &mut Gate, kkt: &mut Vec<(String, f64)>) {
    let t = Instant::now();
    let gammas = [0.05, 0.2, 0.4, 0.6];
    let expected = [(4, [65.9, 84.4, 89.6, 92.0]), (6, [62.9, 75.1, 78.6, 80.1])];
    let reduction_window = [(4, (0.40, 0.70)), (6, (0.30, 0.60))];
    let mut pass = true;
    let mut detail = Vec::new();
    for ((n, reference), (_, (rlo, rhi))) in expected.iter().zip(reduction_window) {
        let mut stage = Vec::new();
        let mut actuation = Vec::new();
        for (g, r) in gammas.iter().zip(reference) {
            let sc = Config::scenario2(*n, *g).scenario_config().expect("valid");
            let log = run_scenario(&sc, &WallClock::new()).expect("scenario runs");
            let c = cumulative_costs(&log);
            pass &= log.feasible();
            pass &= (c.stage - r).abs() <= 0.15 * r;
            kkt.push((format!("N={n} gamma_d={g}"), kkt_stats(&log).0));
            stage.push(c.stage);
            actuation.push(c.actuation);
        }
        let increasing = stage.windows(2).all(|w| w[0] < w[1]);
        let reduction = 1.0 - actuation[0] / actuation[3];
        pass &= increasing && reduction >= rlo && reduction <= rhi;
        detail.push(format!(
            "N={n} stage {:.1}/{:.1}/{:.1}/{:.1} (reference {:?}), actuation reduction {:.1}%",
            stage[0],
            stage[1],
            stage[2],
            stage[3],
            reference,
            100.0 * reduction
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    pass &= secs <= 600.0;
    gate.report(3, "cost monotonicity and magnitude", pass, detail.join("; "), secs);
}

fn input_bounds(gate: &mut Gate) {
    let t = Instant::now();
    let gammas = [0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0];
    let base = Config::scenario2(4, 0.6);
    let certs = [CertificateKind::Qdtcbf, CertificateKind::Dtcbf];
    let rows = bound_grid(&base, &certs, &gammas, jobs()).expect("valid sweep");
    let bound = |k: CertificateKind| -> Vec<Option<f64>> {
        rows.iter()
            .filter(|r| r.cert == k)
            .map(|r| r.search.as_ref().map(|s| s.bound))
            .collect()
    };
    let (q, d) = (bound(CertificateKind::Qdtcbf), bound(CertificateKind::Dtcbf));
    let fmt = |v: &[Option<f64>]| {
        v.iter()
            .map(|b| b.map_or("-".into(), |b| format!("{b:.2}")))
            .collect::<Vec<_>>()
            .join("/")
    };
    let detail = format!("qdtcbf {}, dtcbf {}", fmt(&q), fmt(&d));
    let secs = t.elapsed().as_secs_f64();
    let complete = q.iter().chain(&d).all(Option::is_some);
    let pass = complete && {
        let q: Vec<f64> = q.iter().flatten().copied().collect();
        let d: Vec<f64> = d.iter().flatten().copied().collect();
        let monotone = q.windows(2).all(|w| w[0] <= w[1]);
        let (dmin, dmax) = d
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        monotone
            && (1.1..=1.7).contains(&q[0])
            && (4.4..=5.2).contains(&q[4])
            && dmin >= 7.3
            && dmax <= 8.5
            && dmax - dmin < 0.3
            && d.iter().zip(&q).all(|(d, q)| d >= q)
            && secs <= 1800.0
    };
    gate.report(4, "least input bounds", pass, detail, secs);
}

fn soundness_oracle(gate: &mut Gate) {
    let t = Instant::now();
    let gammas = [0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.8, 0.9, 1.0];
    let opts = VerifierOptions::default();
    let mut unsound = 0;
    let mut bogus = 0;
    let mut open = 0;
    let mut verdicts = Vec::new();
    let mut agree = 0;
    for g in gammas {
        let cfg = Config::scenario2(4, g);
        let vp = cfg.verification_problem().expect("valid");
        let v_max = vp.safety.v_max;
        let mut domain = cfg.domain().expect("valid");
        domain.dims = [
            Interval::new(-120.0, -40.0),
            Interval::new(0.0, v_max),
            Interval::new(-120.0, -40.0),
            Interval::new(0.0, v_max),
        ];
        let r = verify(CertificateKind::Qdtcbf, &vp, &domain, &opts, &WallClock::new(), None).expect("valid problem");
        let stop_early = r.verdict != Verdict::Certified;
        let violation = grid_violation(&vp, v_max, -10.0 * opts.tol, stop_early);
        match r.verdict {
            Verdict::Certified if violation.is_some() => unsound += 1,
            Verdict::Falsified => {
                let x = r.counterexample.expect("falsified reports carry a counterexample");
                let e = two_step_gap(&x, &vp);
                let inside = domain.contains(&x.to_array());
                if !(inside && e.admissible(opts.feasibility_tol) && e.gap < -opts.tol) {
                    bogus += 1;
                }
            }
            Verdict::Inconclusive => open += 1,
            _ => {}
        }
        if (r.verdict == Verdict::Falsified) == violation.is_some() {
            agree += 1;
        }
        verdicts.push(format!("{g}:{:?}", r.verdict));
    }
    let pass = unsound == 0 && bogus == 0 && open == 0;
    gate.report(
        5,
        "verifier soundness vs grid oracle",
        pass,
        format!(
            "{} (grid agrees on {agree}/10), unsound {unsound}, invalid counterexamples {bogus}, inconclusive {open}",
            verdicts.join(" ")
        ),
        t.elapsed().as_secs_f64(),
    );
}

/// Exhaustive grid over `s ∈ [−120, −40]²` (0.5 m) and `v ∈ [0, v_max]²`
/// (0.25 m/s) for a feasible point with two-step gap below `threshold`.
fn grid_violation(vp: &VerificationProblem, v_max: f64, threshold: f64, stop_early: bool) -> Option<[f64; 4]> {
    let s: Vec<f64> = (0..=160).map(|i| -120.0 + 0.5 * i as f64).collect();
    let nv = (v_max / 0.25).floor() as usize;
    let v: Vec<f64> = (0..=nv).map(|i| 0.25 * i as f64).collect();
    let mut worst: Option<([f64; 4], f64)> = None;
    for &s1 in &s {
        for &s2 in &s {
            for &v1 in &v {
                for &v2 in &v {
                    let x = LumpedState::new(s1, v1, s2, v2);
                    let e = two_step_gap(&x, vp);
                    if e.admissible(0.0) && e.gap < threshold {
                        if stop_early {
                            return Some(x.to_array());
                        }
                        if worst.is_none_or(|(_, g)| e.gap < g) {
                            worst = Some((x.to_array(), e.gap));
                        }
                    }
                }
            }
        }
    }
    worst.map(|(x, _)| x)
}

fn hygiene(gate: &mut Gate, kkt: &[(String, f64)]) {
    let t = Instant::now();
    let sp = Config::default().safety_params();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_grad: f64 = 0.0;
    let mut containment_failures = 0;
    for id in FunctionId::ALL {
        for _ in 0..100 {
            let s1 = rng.random_range(-250.0..60.0);
            let x = [
                s1,
                rng.random_range(0.0..15.0),
                s1 - rng.random_range(-40.0..40.0),
                rng.random_range(0.0..15.0),
            ];
            let (_, g) = eval_with_gradient(id, &x, &sp);
            let fd = richardson_gradient(|p| id.evaluate(p, &sp), &x);
            let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let err = (0..4).map(|i| (g[i] - fd[i]).abs()).fold(0.0, f64::max) / scale;
            worst_grad = worst_grad.max(err);
        }
        for _ in 0..1000 {
            let s1 = rng.random_range(-250.0..60.0);
            let lo = [
                s1,
                rng.random_range(0.0..15.0),
                s1 - rng.random_range(-40.0..40.0),
                rng.random_range(0.0..15.0),
            ];
            let w = [
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..3.0),
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..3.0),
            ];
            let b: [Interval; 4] = std::array::from_fn(|i| Interval::new(lo[i], lo[i] + w[i]));
            let p: [f64; 4] = std::array::from_fn(|i| lo[i] + w[i] * rng.random_range(0.0..=1.0));
            let enclosure = id.evaluate(&b, &sp);
            if !enclosure.contains(id.evaluate(&p, &sp)) {
                containment_failures += 1;
            }
        }
    }
    let worst_kkt = kkt.iter().map(|(_, k)| *k).fold(0.0, f64::max);
    let pass = worst_grad <= 1e-6 && containment_failures == 0 && worst_kkt <= 1e-6 && !kkt.is_empty();
    gate.report(
        6,
        "numerical hygiene",
        pass,
        format!(
            "max gradient error {worst_grad:.2e} over {} functions x 100 points, {containment_failures} interval misses in {} samples, max KKT residual {worst_kkt:.2e} over {} converged runs",
            FunctionId::ALL.len(),
            1000 * FunctionId::ALL.len(),
            kkt.len()
        ),
        t.elapsed().as_secs_f64(),
    );
}

/// Central differences with one Richardson extrapolation step.
fn richardson_gradient(f: impl Fn(&[f64; 4]) -> f64, x: &[f64; 4]) -> [f64; 4] {
    let central = |i: usize, h: f64| {
        let (mut p, mut m) = (*x, *x);
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    };
    std::array::from_fn(|i| {
        let h = 1e-3;
        (4.0 * central(i, h / 2.0) - central(i, h)) / 3.0
    })
}

fn random_starts(gate: &mut Gate, kkt: &mut Vec<(String, f64)>) {
    let t = Instant::now();
    let mut cfg = Config::default();
    cfg.scenario.duration = 10.0;
    let sc = cfg.scenario_config().expect("valid");
    let starts = random_feasible_starts(&sc, &cfg.scenario.random_starts, 100, 7).expect("feasible starts exist");
    let mut infeasible = Vec::new();
    let mut steps = 0;
    let mut worst_kkt: f64 = 0.0;
    for (i, x0) in starts.iter().enumerate() {
        let mut s = sc.clone();
        s.x0 = *x0;
        let log = run_scenario(&s, &WallClock::new()).expect("scenario runs");
        steps += log.steps.len();
        if log.outcome != RunOutcome::Completed || log.steps.len() != 100 {
            infeasible.push(i);
        }
        worst_kkt = worst_kkt.max(kkt_stats(&log).0);
    }
    kkt.push(("random starts".into(), worst_kkt));
    gate.report(
        7,
        "recursive feasibility from random starts",
        infeasible.is_empty(),
        format!("{} runs, {steps} steps, failed runs {infeasible:?}", starts.len()),
        t.elapsed().as_secs_f64(),
    );
}

fn main() {
    let picked: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |id: u8| picked.is_empty() || picked.contains(&id);
    let mut gate = Gate { failed: Vec::new() };
    let mut kkt = Vec::new();
    let start = Instant::now();
    let log = if run(1) || run(2) || run(6) {
        scenario_one(&mut gate, &mut kkt)
    } else {
        None
    };
    if run(2) {
        overtake(&mut gate, log.as_ref());
    }
    if run(3) {
        stage_costs(&mut gate, &mut kkt);
    }
    if run(4) {
        input_bounds(&mut gate);
    }
    if run(5) {
        soundness_oracle(&mut gate);
    }
    if run(7) {
        random_starts(&mut gate, &mut kkt);
    }
    if run(6) {
        hygiene(&mut gate, &kkt);
    }
    println!(
        "acceptance finished in {:.1} s, failed criteria: {:?}",
        start.elapsed().as_secs_f64(),
        gate.failed
    );
    if !gate.failed.is_empty() {
        std::process::exit(1);
    }
}
