//! Predictors and nonconformity scores.
//!
//! Regression uses the absolute residual `|f(x) - y|`; classification uses
//! the adaptive-prediction-sets (APS) score, the total probability of every
//! class at least as likely as the candidate.

mod classifier;
mod regressor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classifier::{temperature_softmax, ClassProbabilityModel, LogitRow};
pub use regressor::{
    train_regressor, train_regressor_with, Activation, DenseLayer, RegressionPredictor,
    TrainConfig, DEFAULT_WIDTHS,
};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("class {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },
    #[error("need at least 2 training points, got {0}")]
    TooFewPoints(usize),
    #[error("length mismatch: {0} inputs vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("malformed logits file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A nonconformity score: finite and nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Score(f64);

impl Score {
    pub fn new(value: f64) -> Option<Self> {
        (value.is_finite() && value >= 0.0).then_some(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `|pred - y|`.
pub fn abs_residual_score(pred: f64, y: f64) -> Score {
    Score((pred - y).abs())
}

const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// APS score: sum of `p(c)` over all classes with `p(c) >= p(y)`, `y`
/// included. Ties with `p(y)` are counted in full.
pub fn aps_score(probs: &[f64], y: usize) -> Result<Score, ScoringError> {
    let Some(&py) = probs.get(y) else {
        return Err(ScoringError::InvalidClass {
            class: y,
            classes: probs.len(),
        });
    };
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(ScoringError::NotNormalized(sum));
    }
    let v: f64 = probs.iter().filter(|&&p| p >= py).sum();
    Ok(Score(v.min(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn abs_residual_examples() {
        assert_eq!(abs_residual_score(3.0, 3.0).value(), 0.0);
        assert_eq!(abs_residual_score(1.5, -0.5).value(), 2.0);
        assert_eq!(abs_residual_score(0.0, 7.25).value(), 7.25);
    }

    #[test]
    fn aps_examples() {
        let p = [0.7, 0.2, 0.1];
        assert_abs_diff_eq!(aps_score(&p, 0).unwrap().value(), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(aps_score(&p, 2).unwrap().value(), 1.0, epsilon = 1e-12);
        let p = [0.5, 0.3, 0.2];
        assert_abs_diff_eq!(aps_score(&p, 1).unwrap().value(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn aps_rejects_bad_class_and_unnormalized() {
        assert!(matches!(
            aps_score(&[0.5, 0.5], 2),
            Err(ScoringError::InvalidClass { class: 2, classes: 2 })
        ));
        assert!(matches!(aps_score(&[0.5, 0.6], 0), Err(ScoringError::NotNormalized(_))));
    }

    #[test]
    fn aps_ties_count_fully() {
        let p = [0.4, 0.4, 0.2];
        assert_abs_diff_eq!(aps_score(&p, 0).unwrap().value(), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(aps_score(&p, 1).unwrap().value(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn score_rejects_negative_and_nan() {
        assert!(Score::new(-1.0).is_none());
        assert!(Score::new(f64::NAN).is_none());
        assert_eq!(Score::new(0.5).unwrap().value(), 0.5);
    }

    /// Reference evaluation by sorting: walk classes from most to least
    /// probable and accumulate until (and including) every class tied with y.
    fn aps_by_sort(probs: &[f64], y: usize) -> f64 {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        let mut acc = 0.0;
        for &c in &order {
            if probs[c] < probs[y] {
                break;
            }
            acc += probs[c];
        }
        acc
    }

    fn arb_probs() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, 10).prop_map(|raw| {
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|r| r / s).collect()
        })
    }

    proptest! {
        #[test]
        fn aps_matches_sort_evaluation(probs in arb_probs(), y in 0usize..10) {
            let v = aps_score(&probs, y).unwrap().value();
            prop_assert!((v - aps_by_sort(&probs, y)).abs() < 1e-9);
        }

        #[test]
        fn aps_extremes(probs in arb_probs()) {
            let argmax = (0..10).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
            let argmin = (0..10).min_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
            prop_assert!((aps_score(&probs, argmax).unwrap().value() - probs[argmax]).abs() < 1e-9);
            prop_assert!((aps_score(&probs, argmin).unwrap().value() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn aps_nonincreasing_in_own_probability(
            probs in arb_probs(),
            y in 0usize..10,
            boost in 0.0f64..2.0,
        ) {
            let mut raised = probs.clone();
            raised[y] += boost;
            let s: f64 = raised.iter().sum();
            raised.iter_mut().for_each(|p| *p /= s);
            // rank of y can only improve: fewer classes sit at or above it
            let above = |p: &[f64]| p.iter().filter(|&&q| q >= p[y]).count();
            prop_assert!(above(&raised) <= above(&probs));
            let after = aps_by_sort(&raised, y);
            prop_assert!((aps_score(&raised, y).unwrap().value() - after).abs() < 1e-9);
        }
    }
}
