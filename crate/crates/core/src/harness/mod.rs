//! Benchmark harness: experiment configuration, drivers, and CSV output.
//!
//! The harness turns a flat key-value config file into one of seven
//! experiments — posterior recovery on a mixture target, linear-Gaussian
//! filtering accuracy, likelihood surfaces, gradient-based parameter
//! estimation, predator-prey filtering, cost/accuracy timing sweeps, and
//! ensemble-size convergence — and writes the results as CSV with a
//! reproducibility header. Everything downstream of a `(config, seed)`
//! pair is deterministic except wall-clock measurements.

pub mod config;
pub mod csv;
pub mod descent;
pub mod experiments;

pub use config::{
    config_hash, parse_config, parse_resampler, parse_resampler_list, resampler_spec_string,
    serialize_config, ConfigError, ConvergenceSettings, ExperimentConfig, ExperimentKind,
    GmSettings, KlDirection, LgssmEstimateSettings, LgssmFilterSettings, LgssmSurfaceSettings,
    LvFilterSettings, Settings, TimingSettings,
};
pub use csv::{format_value, git_revision, write_metric_csv, write_table_csv, MetricRow};
pub use descent::{gradient_descent, DescentTrace};
pub use experiments::{
    linear_fit, per_run_seed, run_experiment, write_artifacts, ExperimentArtifacts, SideTable,
};

use crate::linalg::LinalgError;
use crate::models::ModelError;
use crate::resample::ResampleError;
use crate::smc::SmcError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("resampling: {0}")]
    Resample(#[from] ResampleError),
    #[error("particle filter: {0}")]
    Smc(#[from] SmcError),
    #[error("linear algebra: {0}")]
    Linalg(#[from] LinalgError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}
