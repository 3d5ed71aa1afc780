//! Experiment runner: configuration, the training loop for every method,
//! the two-phase tuned protocol, sweeps, the cost benchmark and the oracle
//! verification entry point.

pub mod bench;
pub mod config;
pub mod run;
pub mod sweep;

pub use bench::{benchmark, variant_step, BenchConfig, BenchReport, BenchRow, Variant};
pub use config::{BaselineConfig, Method, ModelConfig, NormalizationConfig, RunConfig};
pub use run::{build_model, run, run_on, tuned, tuned_on, write_outputs, RunOutput, RunSummary, Trajectory, TrajectoryRow, TunedOutput};
pub use sweep::{aggregate, fixed_grid_configs, fraction_configs, seed_configs, sweep, MeanStd, SweepResult, SweepRow};

use crate::error::Result;
use crate::oracles::suites::{self, SuiteReport};

/// Runs every oracle suite with its default instance count.
pub fn verify(seed: u64) -> Result<Vec<SuiteReport>> {
    suites::run_all(seed)
}
