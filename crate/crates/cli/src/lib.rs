//! Config-driven experiment runner: one JSON file in, a directory of CSV and
//! JSON artifacts with a checksummed manifest out.

// validation negates comparisons so that NaN inputs are rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod config;
pub mod error;
pub mod run;
pub mod sweep;

pub use config::{load, prepare, ExperimentConfig, Prepared};
pub use error::CliError;
