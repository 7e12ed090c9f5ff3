//! Density ratios `lambda(x) = p_target(x) / p_cal(x)`.
//!
//! Both sides are Gaussian mixtures. For synthetic data the components are
//! known exactly; in the federated setting every agent moment-matches one
//! Gaussian per class on its (embedded) features and ships the parameters to
//! its peers, and the calibration density is the sample-size-weighted mixture
//! over all agents. Densities are combined in the log domain.

mod gaussian;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gaussian::{GaussianParams, GaussianSpec};

/// Relative ridge added to fitted covariances: `eps * (tr/d + 1) * I`.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Relative floor on the denominator density: `p_cal` is clamped to at least
/// `DENSITY_FLOOR * p_target`, which caps `lambda` at `1 / DENSITY_FLOOR`.
///
/// The floor is relative because in a few hundred dimensions both densities
/// sit far below any absolute floor while their ratio is perfectly ordinary.
pub const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatioError {
    #[error("no data to fit")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite parameter or feature")]
    NonFinite,
    #[error("singular covariance: {0}")]
    SingularCovariance(String),
    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),
}

/// One class component of an agent's moment-matched mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassComponent {
    pub y: usize,
    pub pi: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// The per-agent payload exchanged between peers:
/// `{agent_id, n_i, classes: [{y, pi, mean, cov}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmClassParams {
    pub agent_id: usize,
    pub n_i: usize,
    pub classes: Vec<ClassComponent>,
}

impl GmmClassParams {
    pub fn dim(&self) -> usize {
        self.classes.first().map(|c| c.mean.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), RatioError> {
        if self.classes.is_empty() {
            return Err(RatioError::EmptyInput);
        }
        let total: f64 = self.classes.iter().map(|c| c.pi).sum();
        if (total - 1.0).abs() > 1e-9 || self.classes.iter().any(|c| !(0.0..=1.0).contains(&c.pi)) {
            return Err(RatioError::InvalidWeights(format!("class weights sum to {total}")));
        }
        Ok(())
    }
}

/// Which labels drive the per-class split of an agent's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelSource {
    /// Labels assigned by the trained predictor.
    #[default]
    Predicted,
    /// Ground-truth labels, for ablation.
    True,
}

impl LabelSource {
    pub fn select<'a>(self, predicted: &'a [usize], truth: &'a [usize]) -> &'a [usize] {
        match self {
            LabelSource::Predicted => predicted,
            LabelSource::True => truth,
        }
    }
}

/// Moment-matched per-class Gaussian fit.
///
/// `pi_y = N_y / N`, `m_y` the class mean, `Sigma_y` the biased class
/// covariance (divided by `N_y`) plus the ridge [`COVARIANCE_RIDGE`]. Classes
/// with no examples are omitted.
pub fn fit_gmm_params(
    agent_id: usize,
    features: &[Vec<f64>],
    labels: &[usize],
) -> Result<GmmClassParams, RatioError> {
    if features.is_empty() {
        return Err(RatioError::EmptyInput);
    }
    if features.len() != labels.len() {
        return Err(RatioError::DimensionMismatch {
            expected: features.len(),
            found: labels.len(),
        });
    }
    let d = features[0].len();
    if d == 0 {
        return Err(RatioError::EmptyInput);
    }
    for f in features {
        if f.len() != d {
            return Err(RatioError::DimensionMismatch {
                expected: d,
                found: f.len(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(RatioError::NonFinite);
        }
    }

    let n = features.len();
    let max_class = labels.iter().copied().max().unwrap_or(0);
    let mut classes = Vec::new();
    for y in 0..=max_class {
        let members: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == y)
            .map(|(f, _)| f)
            .collect();
        if members.is_empty() {
            continue;
        }
        let count = members.len() as f64;
        let mut mean = vec![0.0; d];
        for f in &members {
            for (m, v) in mean.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);

        let mut cov = vec![vec![0.0; d]; d];
        for f in &members {
            for i in 0..d {
                let di = f[i] - mean[i];
                for j in 0..d {
                    cov[i][j] += di * (f[j] - mean[j]);
                }
            }
        }
        let trace: f64 = (0..d).map(|i| cov[i][i] / count).sum();
        let ridge = COVARIANCE_RIDGE * (trace / d as f64 + 1.0);
        for (i, row) in cov.iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v /= count;
            }
            row[i] += ridge;
        }

        classes.push(ClassComponent {
            y,
            pi: count / n as f64,
            mean,
            cov,
        });
    }

    Ok(GmmClassParams {
        agent_id,
        n_i: n,
        classes,
    })
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// A weighted sum of Gaussians, stored as `(ln weight, component)` pairs.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    components: Vec<(f64, GaussianSpec)>,
}

impl MixtureDensity {
    /// Components with zero weight are dropped; weights need not sum to one.
    pub fn from_gaussians(components: Vec<(f64, GaussianSpec)>) -> Result<Self, RatioError> {
        if components.iter().any(|(w, _)| !w.is_finite() || *w < 0.0) {
            return Err(RatioError::InvalidWeights("negative or non-finite weight".into()));
        }
        let components: Vec<(f64, GaussianSpec)> = components
            .into_iter()
            .filter(|(w, _)| *w > 0.0)
            .map(|(w, g)| (w.ln(), g))
            .collect();
        if components.is_empty() {
            return Err(RatioError::InvalidWeights("mixture has no mass".into()));
        }
        let d = components[0].1.dim();
        if let Some((_, g)) = components.iter().find(|(_, g)| g.dim() != d) {
            return Err(RatioError::DimensionMismatch {
                expected: d,
                found: g.dim(),
            });
        }
        Ok(Self { components })
    }

    /// `sum_i w_i sum_y pi_y^i N(x; m_y^i, Sigma_y^i)`.
    pub fn from_agents(agents: &[(f64, &GmmClassParams)]) -> Result<Self, RatioError> {
        let mut components = Vec::new();
        for (w, params) in agents {
            params.validate()?;
            for c in &params.classes {
                components.push((w * c.pi, GaussianSpec::new(c.mean.clone(), c.cov.clone())?));
            }
        }
        Self::from_gaussians(components)
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64, RatioError> {
        let logs = self
            .components
            .iter()
            .map(|(lw, g)| g.log_pdf(x).map(|l| lw + l))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(log_sum_exp(logs.into_iter()))
    }

    pub fn density(&self, x: &[f64]) -> Result<f64, RatioError> {
        self.log_density(x).map(f64::exp)
    }
}

/// Evaluates the agent-weighted mixture density at `x`.
pub fn mixture_density(
    params_list: &[(f64, &GmmClassParams)],
    x: &[f64],
) -> Result<f64, RatioError> {
    MixtureDensity::from_agents(params_list)?.density(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatioVariant {
    Exact,
    GmmEstimated,
}

/// `lambda(x) = p_target(x) / max(p_cal(x), DENSITY_FLOOR * p_target(x))`.
#[derive(Debug)]
pub struct RatioModel {
    numerator: MixtureDensity,
    denominator: MixtureDensity,
    variant: RatioVariant,
    floored: AtomicU64,
}

impl Clone for RatioModel {
    fn clone(&self) -> Self {
        Self {
            numerator: self.numerator.clone(),
            denominator: self.denominator.clone(),
            variant: self.variant,
            floored: AtomicU64::new(self.floored.load(Ordering::Relaxed)),
        }
    }
}

impl RatioModel {
    pub fn new(
        numerator: MixtureDensity,
        denominator: MixtureDensity,
        variant: RatioVariant,
    ) -> Result<Self, RatioError> {
        if numerator.dim() != denominator.dim() {
            return Err(RatioError::DimensionMismatch {
                expected: numerator.dim(),
                found: denominator.dim(),
            });
        }
        Ok(Self {
            numerator,
            denominator,
            variant,
            floored: AtomicU64::new(0),
        })
    }

    /// Ratio between two known Gaussian mixtures.
    pub fn exact(
        target: Vec<(f64, GaussianSpec)>,
        calibration: Vec<(f64, GaussianSpec)>,
    ) -> Result<Self, RatioError> {
        Self::new(
            MixtureDensity::from_gaussians(target)?,
            MixtureDensity::from_gaussians(calibration)?,
            RatioVariant::Exact,
        )
    }

    /// Federated estimate: the target agent's mixture over the mixture of all
    /// calibration agents, each weighted by its share `n_i / N` of the data.
    pub fn from_gmm(target: &GmmClassParams, agents: &[GmmClassParams]) -> Result<Self, RatioError> {
        let total: usize = agents.iter().map(|a| a.n_i).sum();
        if total == 0 {
            return Err(RatioError::EmptyInput);
        }
        let weighted: Vec<(f64, &GmmClassParams)> = agents
            .iter()
            .map(|a| (a.n_i as f64 / total as f64, a))
            .collect();
        Self::new(
            MixtureDensity::from_agents(&[(1.0, target)])?,
            MixtureDensity::from_agents(&weighted)?,
            RatioVariant::GmmEstimated,
        )
    }

    pub fn variant(&self) -> RatioVariant {
        self.variant
    }

    pub fn ratio_at(&self, x: &[f64]) -> Result<f64, RatioError> {
        let log_num = self.numerator.log_density(x)?;
        let mut log_den = self.denominator.log_density(x)?;
        let floor = log_num + DENSITY_FLOOR.ln();
        if log_den < floor {
            self.floored.fetch_add(1, Ordering::Relaxed);
            log_den = floor;
        }
        if log_num == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        Ok((log_num - log_den).exp())
    }

    /// Number of evaluations whose denominator hit [`DENSITY_FLOOR`].
    pub fn floored_evaluations(&self) -> u64 {
        self.floored.load(Ordering::Relaxed)
    }
}
