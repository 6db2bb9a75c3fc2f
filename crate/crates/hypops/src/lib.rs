//! Ensembles, statistics, convergence reports and file formats for
//! [`hypops_core`] models, plus the `hypops` command-line driver.

pub mod cli;
pub mod config;
pub mod ensemble;
pub mod output;
pub mod report;
pub mod stats;

pub use config::{ExperimentConfig, Mode, Probe};
pub use ensemble::{run_ensemble, run_replicates, EnsembleStats, RunError, RunSpec, Target};
pub use report::{convergence_report, ConvergenceReport};
pub use stats::{ks_two_sample, StatsError};
