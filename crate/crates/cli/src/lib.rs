//! Configuration files, result writers and the `cbf-mpc` command line on top
//! of `cbf-mpc-core`.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

pub use config::Config;
pub use error::{exit, CliError};
