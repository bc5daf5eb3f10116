//! JSON experiment configuration.
//!
//! One document with the sections `dynamics`, `safety`, `certificate`,
//! `ocp`, `scenario` and `verifier`. Every field is optional and defaults to
//! the overtake-and-merge experiment.

use std::path::Path;

use cbf_mpc_core::certify::{default_domain, VerificationProblem};
use cbf_mpc_core::nlp::SolveOptions;
use cbf_mpc_core::ocp::{CertificateParams, ColdStart, Mode, OcpConfig};
use cbf_mpc_core::scenarios;
use cbf_mpc_core::simloop::{ScenarioConfig, StartSampler};
use cbf_mpc_core::{
    zoh_discretize, ActivationParams, CertificateKind, Interval, LumpedState, SafetyParams, StateBox, VerifierOptions,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dynamics: DynamicsSection,
    pub safety: SafetySection,
    pub certificate: CertificateSection,
    pub ocp: OcpSection,
    pub scenario: ScenarioSection,
    pub verifier: VerifierSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    /// Sample time [s].
    pub ts: f64,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self { ts: scenarios::TS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetySection {
    pub d0: f64,
    pub t_h: f64,
    pub m_lf: f64,
    pub p0: ActivationParams,
    pub p_n: ActivationParams,
    pub eps_d: f64,
    pub v_max: f64,
    /// Vehicle dimensions [m], carried for plotting only.
    pub vehicle_length: f64,
    pub vehicle_width: f64,
}

impl Default for SafetySection {
    fn default() -> Self {
        let sp = scenarios::scenario1().ocp.safety;
        Self {
            d0: sp.d0,
            t_h: sp.t_h,
            m_lf: sp.m_lf,
            p0: sp.p0,
            p_n: sp.p_n,
            eps_d: sp.eps_d,
            v_max: sp.v_max,
            vehicle_length: scenarios::VEHICLE_LENGTH,
            vehicle_width: scenarios::VEHICLE_WIDTH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateSection {
    pub gamma_v: f64,
    pub gamma_d: f64,
    pub dv_min: f64,
}

impl Default for CertificateSection {
    fn default() -> Self {
        let c = scenarios::scenario1().ocp.cert;
        Self {
            gamma_v: c.gamma_v,
            gamma_d: c.gamma_d,
            dv_min: c.dv_min,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpSection {
    pub horizon: usize,
    pub q: [f64; 4],
    pub q_n: [f64; 4],
    pub r: [f64; 2],
    /// Per-agent `[lower, upper]` acceleration bounds [m/s²].
    pub input_bounds: [[f64; 2]; 2],
    pub mode: Mode,
    pub cold_start: ColdStart,
    pub solver: SolveOptions,
}

impl Default for OcpSection {
    fn default() -> Self {
        let o = scenarios::scenario1().ocp;
        Self {
            horizon: o.horizon,
            q: o.q,
            q_n: o.q_n,
            r: o.r,
            input_bounds: o.input_bounds,
            mode: o.mode,
            cold_start: o.cold_start,
            solver: o.solver,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    /// `(s1, v1, s2, v2)`.
    pub x0: [f64; 4],
    pub v_refs: [f64; 2],
    /// Simulated time [s].
    pub duration: f64,
    /// Lane-change point [m], used only for reporting.
    pub s_lc: f64,
    pub seed: u64,
    /// Sampling ranges for `simulate --batch`.
    pub random_starts: StartSampler,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let sc = scenarios::scenario1();
        Self {
            name: sc.name,
            x0: sc.x0.to_array(),
            v_refs: sc.ocp.v_refs,
            duration: sc.duration,
            s_lc: sc.s_lc,
            seed: sc.seed,
            random_starts: StartSampler {
                velocity: [5.0, sc.ocp.safety.v_max],
                ..StartSampler::default()
            },
        }
    }
}

/// Per-dimension `[lo, hi]` ranges of a verification box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub s1: [f64; 2],
    pub v1: [f64; 2],
    pub s2: [f64; 2],
    pub v2: [f64; 2],
}

impl DomainSection {
    pub fn to_box(&self) -> Result<StateBox, CliError> {
        let iv = |r: [f64; 2], what: &str| {
            if r[0] <= r[1] && r[0].is_finite() && r[1].is_finite() {
                Ok(Interval::new(r[0], r[1]))
            } else {
                Err(CliError::Config(format!(
                    "verifier.domain.{what} must be a finite [lo, hi] with lo <= hi"
                )))
            }
        };
        Ok(StateBox::new(
            iv(self.s1, "s1")?,
            iv(self.v1, "v1")?,
            iv(self.s2, "s2")?,
            iv(self.v2, "v2")?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierSection {
    pub cert: CertificateKind,
    /// Defaults to `s ∈ [−250, 60]`, `v ∈ [0, v_max]` when absent.
    pub domain: Option<DomainSection>,
    /// Initial `(low, high)` bracket of the input-bound bisection [m/s²].
    pub bracket: [f64; 2],
    /// Width at which the bisection stops [m/s²].
    pub bisect_tol: f64,
    #[serde(flatten)]
    pub options: VerifierOptions,
}

impl Default for VerifierSection {
    fn default() -> Self {
        Self {
            cert: CertificateKind::Qdtcbf,
            domain: None,
            bracket: [0.5, 12.0],
            bisect_tol: 0.1,
            options: VerifierOptions::default(),
        }
    }
}

impl Config {
    /// Horizon and γ_d study with unit velocity weights and `U = [−4.8, 4.8]`.
    pub fn scenario2(horizon: usize, gamma_d: f64) -> Self {
        let sc = scenarios::scenario2(horizon, gamma_d);
        let mut c = Config::default();
        c.safety.p_n = sc.ocp.safety.p_n;
        c.safety.v_max = sc.ocp.safety.v_max;
        c.certificate.gamma_d = gamma_d;
        c.ocp.horizon = horizon;
        c.ocp.q = sc.ocp.q;
        c.ocp.q_n = sc.ocp.q_n;
        c.ocp.input_bounds = sc.ocp.input_bounds;
        c.ocp.cold_start = sc.ocp.cold_start;
        c.scenario.name = sc.name;
        c.scenario.x0 = sc.x0.to_array();
        c.scenario.v_refs = sc.ocp.v_refs;
        c.scenario.random_starts.velocity[1] = sc.ocp.safety.v_max;
        c
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn safety_params(&self) -> SafetyParams {
        let s = &self.safety;
        SafetyParams {
            d0: s.d0,
            t_h: s.t_h,
            m_lf: s.m_lf,
            p0: s.p0,
            p_n: s.p_n,
            eps_d: s.eps_d,
            v_max: s.v_max,
        }
    }

    pub fn ocp_config(&self) -> Result<OcpConfig, CliError> {
        let o = &self.ocp;
        let cfg = OcpConfig {
            horizon: o.horizon,
            q: o.q,
            q_n: o.q_n,
            r: o.r,
            v_refs: self.scenario.v_refs,
            input_bounds: o.input_bounds,
            dynamics: zoh_discretize(self.dynamics.ts)?,
            safety: self.safety_params(),
            cert: CertificateParams {
                gamma_v: self.certificate.gamma_v,
                gamma_d: self.certificate.gamma_d,
                dv_min: self.certificate.dv_min,
            },
            mode: o.mode,
            cold_start: o.cold_start,
            solver: o.solver,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig, CliError> {
        let s = &self.scenario;
        let [s1, v1, s2, v2] = s.x0;
        let sc = ScenarioConfig {
            name: s.name.clone(),
            x0: LumpedState::new(s1, v1, s2, v2),
            duration: s.duration,
            s_lc: s.s_lc,
            ocp: self.ocp_config()?,
            seed: s.seed,
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn verification_problem(&self) -> Result<VerificationProblem, CliError> {
        let vp = VerificationProblem::from_ocp(&self.ocp_config()?);
        vp.validate()?;
        Ok(vp)
    }

    pub fn domain(&self) -> Result<StateBox, CliError> {
        match &self.verifier.domain {
            Some(d) => d.to_box(),
            None => Ok(default_domain(&self.safety_params())),
        }
    }

    pub fn verifier_options(&self) -> Result<VerifierOptions, CliError> {
        self.verifier.options.validate()?;
        Ok(self.verifier.options)
    }
}
