//! Parameter sets of the two lane-merging experiments.

use alloc::string::String;

use crate::dynamics::{zoh_discretize, LumpedState};
use crate::nlp::SolveOptions;
use crate::ocp::{CertificateParams, ColdStart, Mode, OcpConfig};
use crate::safety::{ActivationParams, SafetyParams};
use crate::simloop::ScenarioConfig;

pub const TS: f64 = 0.1;
pub const D0: f64 = 5.0;
pub const T_H: f64 = 1.0;
pub const M_LF: f64 = 10.0;
pub const GAMMA_V: f64 = 0.8;
pub const EPS_D: f64 = 0.0025;
pub const DV_MIN: f64 = 0.01;
pub const P0: ActivationParams = ActivationParams::new(0.4, -45.0);
/// Vehicle length and width [m]; informational only.
pub const VEHICLE_LENGTH: f64 = 4.2;
pub const VEHICLE_WIDTH: f64 = 2.0;

/// `s1` at which `L_d(·; p0)` reaches 0.9.
pub fn default_s_lc() -> f64 {
    P0.position_at(0.9)
}

fn safety(p_n: ActivationParams, v_max: f64) -> SafetyParams {
    SafetyParams {
        d0: D0,
        t_h: T_H,
        m_lf: M_LF,
        p0: P0,
        p_n,
        eps_d: EPS_D,
        v_max,
    }
}

/// Overtake-and-merge experiment: N = 15, U = [−3, 3], γ_d = 0.15.
pub fn scenario1() -> ScenarioConfig {
    ScenarioConfig {
        name: String::from("scenario1"),
        x0: LumpedState::new(-165.0, 13.0, -160.0, 12.5),
        duration: 12.0,
        s_lc: -39.5,
        ocp: OcpConfig {
            horizon: 15,
            q: [0.0, 10.0, 0.0, 10.0],
            q_n: [0.0, 10.0, 0.0, 10.0],
            r: [1.0, 1.0],
            v_refs: [13.0, 12.5],
            input_bounds: [[-3.0, 3.0], [-3.0, 3.0]],
            dynamics: zoh_discretize(TS).expect("positive sample time"),
            safety: safety(ActivationParams::new(0.06, -75.0), 15.0),
            cert: CertificateParams {
                gamma_v: GAMMA_V,
                gamma_d: 0.15,
                dv_min: DV_MIN,
            },
            mode: Mode::Certified,
            // Seeds the first solve with agent 1 accelerating and agent 2
            // braking, which selects the overtaking local optimum.
            cold_start: ColdStart::Rollout { input: [3.0, -3.0] },
            solver: SolveOptions::default(),
        },
        seed: 0,
    }
}

/// Horizon and γ_d study: U = [−4.8, 4.8], v̄ = 14.5, unit velocity weights.
pub fn scenario2(horizon: usize, gamma_d: f64) -> ScenarioConfig {
    let mut sc = scenario1();
    sc.name = String::from("scenario2");
    sc.x0 = LumpedState::new(-115.0, 13.5, -105.0, 13.5);
    sc.ocp.horizon = horizon;
    sc.ocp.q = [0.0, 1.0, 0.0, 1.0];
    sc.ocp.q_n = [0.0, 1.0, 0.0, 1.0];
    sc.ocp.v_refs = [13.5, 13.5];
    sc.ocp.input_bounds = [[-4.8, 4.8], [-4.8, 4.8]];
    sc.ocp.safety = safety(ActivationParams::new(0.045, -85.0), 14.5);
    sc.ocp.cert.gamma_d = gamma_d;
    sc.ocp.cold_start = ColdStart::default();
    sc
}
