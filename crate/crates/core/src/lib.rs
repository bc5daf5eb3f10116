//! Recursively feasible lane-merging NMPC with discrete-time control barrier
//! function terminal certificates.
//!
//! The crate is `no_std` with `alloc`. IO, configuration files and the CLI
//! live in the `cbf-mpc` companion crate.

#![no_std]

extern crate alloc;

pub mod ad;
pub mod certify;
pub mod dynamics;
pub mod error;
pub mod interval;
pub mod nlp;
pub mod ocp;
pub mod qp;
pub mod safety;
pub mod scalar;
pub mod scenarios;
pub mod simloop;

pub use certify::{CertificateKind, Verdict, VerificationProblem, VerificationReport, VerifierOptions};
pub use dynamics::{step, zoh_discretize, AgentState, ControlInput, DiscreteDynamics, LumpedState};
pub use error::{Error, Result};
pub use interval::{Interval, StateBox};
pub use safety::{eval_with_gradient, ActivationParams, FunctionId, SafetyParams};
pub use scalar::Scalar;
