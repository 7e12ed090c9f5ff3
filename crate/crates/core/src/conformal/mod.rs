//! Prediction sets from calibration scores.
//!
//! Every method reads its threshold off a [`WeightedScoreMeasure`]:
//!
//! * split conformal: uniform mass `1/(N+1)` on each score and on `+inf`;
//! * weighted: mass `lambda_k / (lambda(x) + sum_l lambda_l)` on score `k` and
//!   `lambda(x) / (lambda(x) + sum_l lambda_l)` on `+inf`;
//! * query-independent: mass `lambda_k / sum_l lambda_l`, no infinity atom.
//!
//! Under covariate shift the ratio depends on `x` only, so one threshold per
//! query serves every candidate label.

mod bounds;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{Extended, MeasureError, WeightedScoreMeasure, LEVEL_TOLERANCE};
use crate::ratio::{RatioError, RatioModel};
use crate::scoring::{aps_score, Score, ScoringError};

pub use bounds::{
    theorem1_sandwich, theorem1_tau, theorem2_bias_bound, BoundInputs, BoundReport,
};

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("weights carry no mass")]
    DegenerateWeights,
    #[error("invalid ratio {0}")]
    InvalidRatio(f64),
    #[error("{name} = {value} out of range: {reason}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Ratio(#[from] RatioError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Real(f64),
    Class(usize),
}

/// One calibration point: its feature, label, score and density ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub feature: Vec<f64>,
    pub label: Label,
    pub score: Score,
    pub ratio: f64,
}

impl CalibrationRecord {
    pub fn new(feature: Vec<f64>, label: Label, score: Score, ratio: f64) -> Self {
        Self {
            feature,
            label,
            score,
            ratio,
        }
    }

    /// Record carrying only a score and a ratio.
    pub fn bare(score: Score, ratio: f64) -> Self {
        Self::new(Vec::new(), Label::Real(f64::NAN), score, ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub center: f64,
    pub half_width: Extended,
}

impl PredictionInterval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width.to_f64()
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width.to_f64()
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width.to_f64()
    }

    pub fn contains(&self, y: f64) -> bool {
        match self.half_width {
            Extended::Infinity => true,
            Extended::Finite(t) => (y - self.center).abs() <= t,
        }
    }
}

/// Included class indices; may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PredictionSetLabels {
    pub classes: BTreeSet<usize>,
}

impl PredictionSetLabels {
    pub fn contains(&self, y: usize) -> bool {
        self.classes.contains(&y)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::InvalidAlpha(alpha))
    }
}

fn check_ratio(r: f64) -> Result<(), ConformalError> {
    if r.is_finite() && r >= 0.0 {
        Ok(())
    } else {
        Err(ConformalError::InvalidRatio(r))
    }
}

fn finite_scores(records: &[CalibrationRecord]) -> Vec<Extended> {
    records
        .iter()
        .map(|r| Extended::Finite(r.score.value()))
        .collect()
}

/// Split conformal threshold: `Q_{1-alpha}` of the uniform measure over the
/// calibration scores and `+inf`.
pub fn scp_threshold(records: &[CalibrationRecord], alpha: f64) -> Result<Extended, ConformalError> {
    check_alpha(alpha)?;
    if records.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    let mut scores = finite_scores(records);
    scores.push(Extended::Infinity);
    let weights = vec![1.0; scores.len()];
    Ok(WeightedScoreMeasure::build(&scores, &weights)?.quantile(1.0 - alpha))
}

/// Builds the weighted measure for a query whose ratio is `lambda_test`.
pub fn weighted_measure(
    records: &[CalibrationRecord],
    lambda_test: f64,
) -> Result<WeightedScoreMeasure, ConformalError> {
    if records.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    check_ratio(lambda_test)?;
    let mut total = lambda_test;
    for r in records {
        check_ratio(r.ratio)?;
        total += r.ratio;
    }
    if total <= 0.0 {
        return Err(ConformalError::DegenerateWeights);
    }
    let mut scores = finite_scores(records);
    scores.push(Extended::Infinity);
    let mut weights: Vec<f64> = records.iter().map(|r| r.ratio / total).collect();
    weights.push(lambda_test / total);
    Ok(WeightedScoreMeasure::build(&scores, &weights)?)
}

/// Weighted threshold with mass `lambda_k / (lambda_test + sum lambda)` on
/// each score and `lambda_test / (lambda_test + sum lambda)` on `+inf`.
pub fn weighted_threshold(
    records: &[CalibrationRecord],
    lambda_test: f64,
    alpha: f64,
) -> Result<Extended, ConformalError> {
    check_alpha(alpha)?;
    Ok(weighted_measure(records, lambda_test)?.quantile(1.0 - alpha))
}

/// Weighted quantile of i.i.d. calibration data under a known likelihood
/// ratio `w`, evaluated by a direct sorted scan.
///
/// Serves as an independent reference for [`weighted_threshold`]; it assumes
/// the calibration points are i.i.d., which the caller must guarantee.
pub fn tibshirani_iid_threshold(
    records: &[CalibrationRecord],
    cal_weights: &[f64],
    test_weight: f64,
    alpha: f64,
) -> Result<Extended, ConformalError> {
    check_alpha(alpha)?;
    if records.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    if cal_weights.len() != records.len() {
        return Err(MeasureError::LengthMismatch {
            scores: records.len(),
            weights: cal_weights.len(),
        }
        .into());
    }
    check_ratio(test_weight)?;
    for &w in cal_weights {
        check_ratio(w)?;
    }
    let denom: f64 = cal_weights.iter().sum::<f64>() + test_weight;
    if denom <= 0.0 {
        return Err(ConformalError::DegenerateWeights);
    }

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.value().total_cmp(&records[b].score.value()));
    let level = 1.0 - alpha - LEVEL_TOLERANCE;
    let mut cumulative = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = records[order[i]].score.value();
        while i < order.len() && records[order[i]].score.value() == v {
            cumulative += cal_weights[order[i]] / denom;
            i += 1;
        }
        if cumulative >= level {
            return Ok(Extended::Finite(v));
        }
    }
    Ok(Extended::Infinity)
}

/// Query-independent threshold: `Q_{1-alpha}` of `sum_k (lambda_k / sum_l
/// lambda_l) delta_{V_k}`, with no infinity atom.
pub fn approx_global_threshold(
    records: &[CalibrationRecord],
    alpha: f64,
) -> Result<Extended, ConformalError> {
    check_alpha(alpha)?;
    if records.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    let mut total = 0.0;
    for r in records {
        check_ratio(r.ratio)?;
        total += r.ratio;
    }
    if total <= 0.0 {
        return Err(ConformalError::DegenerateWeights);
    }
    let scores = finite_scores(records);
    let weights: Vec<f64> = records.iter().map(|r| r.ratio).collect();
    Ok(WeightedScoreMeasure::build(&scores, &weights)?.quantile(1.0 - alpha))
}

/// Interval `pred -/+ t` with `t` the weighted threshold at `lambda(x)`.
pub fn predict_interval(
    pred: f64,
    records: &[CalibrationRecord],
    ratio_model: &RatioModel,
    x: &[f64],
    alpha: f64,
) -> Result<PredictionInterval, ConformalError> {
    let lambda = ratio_model.ratio_at(x)?;
    Ok(PredictionInterval {
        center: pred,
        half_width: weighted_threshold(records, lambda, alpha)?,
    })
}

/// All classes whose APS score is at most the weighted threshold at `x`.
pub fn predict_label_set(
    probs: &[f64],
    records: &[CalibrationRecord],
    ratio_model: &RatioModel,
    x: &[f64],
    alpha: f64,
) -> Result<PredictionSetLabels, ConformalError> {
    let lambda = ratio_model.ratio_at(x)?;
    let threshold = weighted_threshold(records, lambda, alpha)?;
    label_set_for_threshold(probs, threshold)
}

/// Classes with APS score `<= threshold`.
pub fn label_set_for_threshold(
    probs: &[f64],
    threshold: Extended,
) -> Result<PredictionSetLabels, ConformalError> {
    let mut classes = BTreeSet::new();
    for y in 0..probs.len() {
        if Extended::Finite(aps_score(probs, y)?.value()) <= threshold {
            classes.insert(y);
        }
    }
    Ok(PredictionSetLabels { classes })
}

/// Calibration scores pre-sorted for repeated weighted-threshold queries.
///
/// The finite atoms of the weighted measure do not depend on the query, so
/// their cumulative ratios are computed once and each query costs a binary
/// search. Agrees with [`weighted_threshold`].
#[derive(Debug, Clone)]
pub struct WeightedCalibration {
    values: Vec<f64>,
    cumulative: Vec<f64>,
    total: f64,
}

impl WeightedCalibration {
    pub fn new(records: &[CalibrationRecord]) -> Result<Self, ConformalError> {
        let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.score.value(), r.ratio)).collect();
        Self::from_pairs(pairs)
    }

    /// From `(score, ratio)` pairs.
    pub fn from_pairs(mut pairs: Vec<(f64, f64)>) -> Result<Self, ConformalError> {
        if pairs.is_empty() {
            return Err(ConformalError::EmptyCalibration);
        }
        for &(s, r) in &pairs {
            if !s.is_finite() || s < 0.0 {
                return Err(MeasureError::NonFinite(format!("score {s}")).into());
            }
            check_ratio(r)?;
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut masses: Vec<f64> = Vec::with_capacity(pairs.len());
        for (s, r) in pairs {
            match values.last() {
                Some(&last) if last == s => *masses.last_mut().unwrap() += r,
                _ => {
                    values.push(s);
                    masses.push(r);
                }
            }
        }
        let mut acc = 0.0;
        let cumulative = masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        Ok(Self {
            values,
            cumulative,
            total: acc,
        })
    }

    pub fn total_ratio(&self) -> f64 {
        self.total
    }

    pub fn threshold(&self, lambda_test: f64, alpha: f64) -> Result<Extended, ConformalError> {
        check_alpha(alpha)?;
        check_ratio(lambda_test)?;
        let denom = self.total + lambda_test;
        if denom <= 0.0 {
            return Err(ConformalError::DegenerateWeights);
        }
        let level = 1.0 - alpha - LEVEL_TOLERANCE;
        let idx = self.cumulative.partition_point(|c| c / denom < level);
        Ok(self
            .values
            .get(idx)
            .map(|&v| Extended::Finite(v))
            .unwrap_or(Extended::Infinity))
    }
}
