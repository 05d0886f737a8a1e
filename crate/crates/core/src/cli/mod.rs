//! Configuration and batch orchestration for the `condtest` binary.

pub mod config;
pub mod run;

pub use config::{Overrides, Provenance, RunConfig};
pub use run::{prepare, run_invert, run_power, run_simulate, run_test, BatchReport, InversionSummary, PowerRow};
