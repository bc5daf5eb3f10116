use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use cbf_mpc::output::{write_json, RunManifest};
use cbf_mpc::run::{self, Finished, Overrides, SweepSpec};
use cbf_mpc::{exit, CliError, Config};
use cbf_mpc_core::ocp::Mode;
use cbf_mpc_core::CertificateKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Recursively feasible lane-merging NMPC: closed-loop simulation,
/// certificate verification and parameter sweeps.
#[derive(Parser)]
#[command(name = "cbf-mpc", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON experiment file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; `CBF_MPC_THREADS` takes precedence.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Certified,
}

#[derive(Clone, Copy, ValueEnum)]
enum CertArg {
    Dtcbf,
    Qdtcbf,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Certified => Mode::Certified,
        }
    }
}

impl From<CertArg> for CertificateKind {
    fn from(c: CertArg) -> Self {
        match c {
            CertArg::Dtcbf => CertificateKind::Dtcbf,
            CertArg::Qdtcbf => CertificateKind::Qdtcbf,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the closed loop and write trajectory.csv and summary.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Run this many random feasible starts instead and write batch.csv.
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Verify the terminal certificate over the configured domain.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        cert: Option<CertArg>,
        /// Gap tolerance.
        #[arg(long)]
        tol: Option<f64>,
        /// Node budget.
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Cumulative costs over a (horizon, gamma_d) grid, or least input
    /// bounds over a (certificate, gamma_d) grid with --bisect.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
        /// Horizons of the cost grid; the configured horizon when omitted.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
        #[arg(long)]
        bisect: bool,
        /// Certificates of the bound grid; both when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        cert: Vec<CertArg>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Cumulative tracking, actuation and stage cost of a run.
    Costs {
        #[command(flatten)]
        common: Common,
        /// Sum an existing trajectory.csv instead of simulating.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
}

fn jobs(flag: Option<usize>) -> Result<usize, CliError> {
    if let Ok(v) = std::env::var("CBF_MPC_THREADS") {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!(
                "CBF_MPC_THREADS must be a positive integer, got {v:?}"
            ))),
        };
    }
    match flag {
        Some(0) => Err(CliError::Config("--jobs must be positive".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load(common: &Common, overrides: Overrides) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn dispatch(cmd: &Cmd) -> Result<(String, Config, &Path, Finished), CliError> {
    match cmd {
        Cmd::Simulate { common, mode, batch } => {
            let cfg = load(
                common,
                Overrides {
                    mode: mode.map(Into::into),
                    ..Default::default()
                },
            )?;
            let done = match batch {
                Some(n) => run::simulate_batch(&cfg, &common.out, *n, jobs(common.jobs)?)?,
                None => run::simulate(&cfg, &common.out)?,
            };
            Ok(("simulate".into(), cfg, &common.out, done))
        }
        Cmd::Verify {
            common,
            cert,
            tol,
            budget,
        } => {
            let o = Overrides {
                cert: cert.map(Into::into),
                tol: *tol,
                budget: *budget,
                ..Default::default()
            };
            let cfg = load(common, o)?;
            let done = run::cmd_verify(&cfg, &common.out, jobs(common.jobs)?)?;
            Ok(("verify".into(), cfg, &common.out, done))
        }
        Cmd::Sweep {
            common,
            gammas,
            horizons,
            bisect,
            cert,
            mode,
            tol,
            budget,
        } => {
            let o = Overrides {
                mode: mode.map(Into::into),
                tol: *tol,
                budget: *budget,
                ..Default::default()
            };
            let cfg = load(common, o)?;
            let spec = if *bisect {
                let certs = if cert.is_empty() {
                    vec![CertificateKind::Qdtcbf, CertificateKind::Dtcbf]
                } else {
                    cert.iter().map(|&c| c.into()).collect()
                };
                SweepSpec::Bounds {
                    certs,
                    gammas: gammas.clone(),
                }
            } else {
                let horizons = if horizons.is_empty() {
                    vec![cfg.ocp.horizon]
                } else {
                    horizons.clone()
                };
                SweepSpec::Costs {
                    horizons,
                    gammas: gammas.clone(),
                }
            };
            let done = run::sweep(&cfg, &spec, &common.out, jobs(common.jobs)?)?;
            Ok(("sweep".into(), cfg, &common.out, done))
        }
        Cmd::Costs { common, log, mode } => {
            let cfg = load(
                common,
                Overrides {
                    mode: mode.map(Into::into),
                    ..Default::default()
                },
            )?;
            let done = run::costs(&cfg, log.as_deref(), &common.out)?;
            Ok(("costs".into(), cfg, &common.out, done))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let started_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64());
    let (subcommand, config, out, done) = match dispatch(&cli.cmd) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let path = out.join("manifest.json");
    let mut outputs = done.outputs;
    outputs.push(path.clone());
    let manifest = RunManifest {
        command: std::env::args().collect(),
        subcommand,
        config,
        version: env!("CARGO_PKG_VERSION").into(),
        started_at,
        wall_time: started.elapsed().as_secs_f64(),
        exit_code: done.code,
        outputs,
    };
    if let Err(e) = write_json(&path, &manifest) {
        eprintln!("error: {e}");
        return ExitCode::from(exit::IO as u8);
    }
    ExitCode::from(done.code as u8)
}
