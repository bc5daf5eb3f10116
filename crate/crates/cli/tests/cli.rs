use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cbf_mpc::output::RunManifest;
use cbf_mpc::Config;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cbf-mpc"));
    c.env_remove("CBF_MPC_THREADS");
    c
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, cfg: &Config) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn bundled_configs_match_builtins() {
    assert_eq!(Config::load(&bundled("scenario1.json")).unwrap(), Config::default());
    assert_eq!(
        Config::load(&bundled("scenario2.json")).unwrap(),
        Config::scenario2(4, 0.6)
    );
}

#[test]
fn simulate_scenario_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "simulate",
        "--config",
        bundled("scenario1.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,s1,v1,s2,v2,a1,a2,dist,min_dist,tracking_cost,actuation_cost,solve_iters,solve_time"
    );
    assert_eq!(lines.count(), 120);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["outcome"]["kind"], "completed");
    assert_eq!(summary["overtake_before_lane_change"], true);
    assert!(summary["audit"]["min_margin"].as_f64().unwrap() >= -1e-6);

    let manifest: RunManifest = serde_json::from_value(read_json(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest.subcommand, "simulate");
    assert_eq!(manifest.exit_code, 0);
    for f in ["trajectory.csv", "summary.json", "manifest.json"] {
        assert!(manifest.outputs.contains(&out.join(f)), "{f} missing from manifest");
    }

    // The snapshot alone reproduces every column except the measured solve time.
    let again = dir.path().join("again");
    let cfg = write_config(dir.path(), &manifest.config);
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let strip = |s: &str| -> Vec<String> { s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect() };
    assert_eq!(
        strip(&csv),
        strip(&std::fs::read_to_string(again.join("trajectory.csv")).unwrap())
    );

    let o = run(&[
        "costs",
        "--log",
        out.join("trajectory.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let costs = read_json(&out.join("costs.json"));
    let stage = summary["costs"]["stage"].as_f64().unwrap();
    assert!((costs["costs"]["stage"].as_f64().unwrap() - stage).abs() <= 1e-8 * stage);
    assert_eq!(costs["steps"], 120);
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\"ocp\": {").unwrap();
    let o = run(&[
        "simulate",
        "--config",
        p.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));

    std::fs::write(&p, "{\"certificate\": {\"gamma_d\": 2.0}}").unwrap();
    let o = run(&[
        "simulate",
        "--config",
        p.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tight_inputs_exit_3_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::scenario2(4, 0.6);
    cfg.ocp.input_bounds = [[-0.5, 0.5], [-0.5, 0.5]];
    let p = write_config(dir.path(), &cfg);
    let o = run(&[
        "simulate",
        "--config",
        p.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible at step"));
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::scenario2(4, 0.9);
    let p = write_config(dir.path(), &cfg);
    let out = dir.path().join("v");
    let o = run(&[
        "verify",
        "--config",
        p.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(5));
    let r = read_json(&out.join("verification.json"));
    assert_eq!(r["verdict"], "falsified");
    assert!(r["counterexample_gap"].as_f64().unwrap() < -1e-6);
    assert!(r["counterexample"]["agent1"]["s"].is_number());

    let o = run(&[
        "verify",
        "--config",
        p.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--budget",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(6));
    assert_eq!(read_json(&out.join("verification.json"))["verdict"], "inconclusive");
}

#[test]
fn verify_partitioned_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::scenario2(4, 0.6);
    let p = write_config(dir.path(), &cfg);
    for cert in ["dtcbf", "qdtcbf"] {
        let out = dir.path().join(cert);
        let o = bin()
            .args([
                "verify",
                "--config",
                p.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--cert",
                cert,
            ])
            .env("CBF_MPC_THREADS", "3")
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(5), "{cert}");
        let r = read_json(&out.join("verification.json"));
        assert_eq!(r["domain"]["dims"][0], serde_json::json!({"lo": -250.0, "hi": 60.0}));
    }
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = bin()
        .args([
            "verify",
            "--budget",
            "10",
            "--out",
            tempfile::tempdir().unwrap().path().to_str().unwrap(),
        ])
        .env("CBF_MPC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let p = bundled("scenario2.json");
    let out = dir.path().join("s");
    let o = run(&[
        "sweep",
        "--config",
        p.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--gammas",
        "",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&[
        "sweep",
        "--config",
        p.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--gammas",
        "0.05,0.6",
        "--horizons",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.join("costs.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    let stage: Vec<f64> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(stage[0] < stage[1]);

    let mut cfg = Config::scenario2(4, 0.6);
    cfg.verifier.bracket = [2.0, 12.0];
    cfg.verifier.bisect_tol = 2.0;
    let p = write_config(dir.path(), &cfg);
    let o = run(&[
        "sweep",
        "--bisect",
        "--config",
        p.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--gammas",
        "0.6",
        "--cert",
        "dtcbf",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.join("bounds.csv")).unwrap();
    let row = r.records().next().unwrap().unwrap();
    assert_eq!(&row[0], "dtcbf");
    let (lo, hi): (f64, f64) = (row[3].parse().unwrap(), row[4].parse().unwrap());
    assert!(lo < 7.9 && 7.9 < hi && hi - lo <= 2.0);
}
