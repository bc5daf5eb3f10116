//! CSV and JSON writers.

use std::fs;
use std::path::{Path, PathBuf};

use cbf_mpc_core::simloop::{CostSummary, TrajectoryLog};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::CliError;

pub const TRAJECTORY_COLUMNS: [&str; 13] = [
    "t",
    "s1",
    "v1",
    "s2",
    "v2",
    "a1",
    "a2",
    "dist",
    "min_dist",
    "tracking_cost",
    "actuation_cost",
    "solve_iters",
    "solve_time",
];

/// Shortest decimal rendering with 12 significant digits, like C's `%.12g`.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let fixed = format!("{x:.*}", (11 - exp) as usize);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_trajectory_csv(path: &Path, log: &TrajectoryLog) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAJECTORY_COLUMNS)?;
    for r in &log.steps {
        let x = r.state.to_array();
        let nums = [
            r.t,
            x[0],
            x[1],
            x[2],
            x[3],
            r.input.a1,
            r.input.a2,
            r.distance,
            r.min_distance,
            r.tracking_cost,
            r.actuation_cost,
        ];
        let mut row: Vec<String> = nums.iter().map(|v| fmt_num(*v)).collect();
        row.push(r.solve_iters.to_string());
        row.push(fmt_num(r.solve_time));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Sums the cost columns of a trajectory CSV.
pub fn costs_from_csv(path: &Path) -> Result<(CostSummary, usize), CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("{}: missing column {name}", path.display())))
    };
    let (ti, ai) = (col("tracking_cost")?, col("actuation_cost")?);
    let mut sum = CostSummary::default();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| CliError::Config(format!("{}: row {}: {e}", path.display(), rows + 1)))
        };
        sum.tracking += num(ti)?;
        sum.actuation += num(ai)?;
        rows += 1;
    }
    sum.stage = sum.tracking + sum.actuation;
    Ok((sum, rows))
}

/// Writes `rows` under `header`, formatting every number with [`fmt_num`].
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(Cell::render))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(x) => fmt_num(*x),
            Cell::Int(n) => n.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Full command line.
    pub command: Vec<String>,
    pub subcommand: String,
    /// Resolved configuration, including command-line overrides.
    pub config: Config,
    pub version: String,
    /// Seconds since the Unix epoch at start.
    pub started_at: f64,
    /// Wall-clock duration [s].
    pub wall_time: f64,
    pub exit_code: i32,
    /// Files written by the run, the manifest included.
    pub outputs: Vec<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(-0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(0.1), "0.1");
        assert_eq!(fmt_num(-165.0), "-165");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(2.0 / 3.0 * 100.0), "66.6666666667");
        assert_eq!(fmt_num(123456789012345.0), "1.23456789012e14");
        assert_eq!(fmt_num(1.5e-7), "1.5e-7");
        assert_eq!(fmt_num(9.9999999999999e-5), "0.0001");
        assert_eq!(fmt_num(f64::INFINITY), "inf");
    }

    #[test]
    fn formatting_is_idempotent() {
        for x in [1.0 / 7.0, -2.5e-9, 12.345678901234567, 1e300, -13.000000000001] {
            let once = fmt_num(x);
            let again = fmt_num(once.parse().unwrap());
            assert_eq!(once, again);
        }
    }
}
