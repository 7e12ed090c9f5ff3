//! Conformal prediction under covariate shift with efficiently computable
//! importance weights.
//!
//! * [`measure`]: weighted discrete score measures and their quantiles.
//! * [`scoring`]: predictors and nonconformity scores.
//! * [`ratio`]: exact and GMM-estimated density ratios.
//! * [`conformal`]: thresholds, prediction sets and bound calculators.

pub mod conformal;
pub mod measure;
pub mod ratio;
pub mod scoring;
pub mod seed;

pub use measure::{build_measure, Extended, ScoreAtom, WeightedScoreMeasure};
