use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::RatioError;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Multivariate normal with a validated (Cholesky-factorizable) covariance.
#[derive(Debug, Clone)]
pub struct GaussianSpec {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    /// `-0.5 * (d ln 2pi + ln det cov)`
    log_normalizer: f64,
}

/// Plain-data form used for serialization and construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self, RatioError> {
        let d = mean.len();
        if d == 0 {
            return Err(RatioError::EmptyInput);
        }
        if cov.len() != d || cov.iter().any(|row| row.len() != d) {
            return Err(RatioError::DimensionMismatch {
                expected: d,
                found: cov.len(),
            });
        }
        if mean.iter().chain(cov.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(RatioError::NonFinite);
        }
        let covariance = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (covariance[(i, j)], covariance[(j, i)]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    return Err(RatioError::SingularCovariance(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let factor = Cholesky::new(covariance.clone()).ok_or_else(|| {
            RatioError::SingularCovariance("covariance is not positive definite".into())
        })?;
        let log_det: f64 = 2.0 * factor.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
            factor,
            log_normalizer: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    /// One-dimensional normal with the given mean and variance.
    pub fn univariate(mean: f64, variance: f64) -> Result<Self, RatioError> {
        Self::new(vec![mean], vec![vec![variance]])
    }

    pub fn from_params(params: &GaussianParams) -> Result<Self, RatioError> {
        Self::new(params.mean.clone(), params.cov.clone())
    }

    pub fn params(&self) -> GaussianParams {
        let d = self.dim();
        GaussianParams {
            mean: self.mean.iter().copied().collect(),
            cov: (0..d)
                .map(|i| (0..d).map(|j| self.covariance[(i, j)]).collect())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64, RatioError> {
        if x.len() != self.dim() {
            return Err(RatioError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let diff = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        // Mahalanobis term via a triangular solve against L.
        let z = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&diff)
            .ok_or_else(|| RatioError::SingularCovariance("triangular solve failed".into()))?;
        Ok(self.log_normalizer - 0.5 * z.norm_squared())
    }

    pub fn pdf(&self, x: &[f64]) -> Result<f64, RatioError> {
        self.log_pdf(x).map(f64::exp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn standard_normal_mode() {
        for d in 1..=4 {
            let eye: Vec<Vec<f64>> = (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect();
            let g = GaussianSpec::new(vec![0.0; d], eye).unwrap();
            let expected = (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0);
            assert_abs_diff_eq!(g.pdf(&vec![0.0; d]).unwrap(), expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn univariate_reference_value() {
        // exp(-1/4) / sqrt(4 pi)
        let g = GaussianSpec::univariate(0.0, 2.0).unwrap();
        assert_abs_diff_eq!(g.pdf(&[1.0]).unwrap(), 0.219_695_644_7, epsilon = 1e-9);
    }

    #[test]
    fn correlated_matches_closed_form() {
        let cov = vec![vec![2.0, 0.6], vec![0.6, 1.0]];
        let g = GaussianSpec::new(vec![1.0, -1.0], cov).unwrap();
        let det: f64 = 2.0 * 1.0 - 0.36;
        let inv = [[1.0 / det, -0.6 / det], [-0.6 / det, 2.0 / det]];
        let d = [0.5, 0.3];
        let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
        let expected = (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
        assert_abs_diff_eq!(g.pdf(&[1.5, -0.7]).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        assert!(matches!(
            GaussianSpec::new(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]),
            Err(RatioError::SingularCovariance(_))
        ));
        assert!(matches!(
            GaussianSpec::new(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.0, 1.0]]),
            Err(RatioError::SingularCovariance(_))
        ));
        assert!(GaussianSpec::univariate(0.0, 0.0).is_err());
        assert!(GaussianSpec::univariate(0.0, -1.0).is_err());
    }

    #[test]
    fn dimension_checked_on_eval() {
        let g = GaussianSpec::univariate(0.0, 1.0).unwrap();
        assert!(matches!(g.log_pdf(&[0.0, 1.0]), Err(RatioError::DimensionMismatch { .. })));
    }
}
