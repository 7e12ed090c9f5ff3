//! Synthetic covariate-shift experiments, Monte Carlo checks of the coverage
//! laws, and the `fedcp` command-line tool.

pub mod checks;
pub mod experiment;
pub mod format;
pub mod synthetic;

use thiserror::Error;

use fedcp_core::conformal::ConformalError;
use fedcp_core::ratio::RatioError;
use fedcp_core::scoring::ScoringError;
use fedcp_fedsim::FedError;

pub use checks::{
    beta_law_check, bound_check, gmm_ratio_sanity, marginal_coverage_check, BetaCheckReport, BetaMode,
    BoundCheckConfig, BoundCheckReport, GmmSanityReport, MarginalReport,
};
pub use experiment::{
    run_experiment, run_replication, Arm, ArmSummary, ExperimentConfig, ExperimentReport, FedArmConfig, Method,
    ReplicationResult,
};
pub use synthetic::{sample_synthetic, CalibrationSource, Dataset, SyntheticSample, SyntheticSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Ratio(#[from] RatioError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
