//! Calculators for the high-probability deviation radius of the conditional
//! miscoverage and for the bias of its mean.

use serde::{Deserialize, Serialize};

use super::ConformalError;

/// `tau = N^-1 sqrt(8 ln(1/(6 delta)) sum_k (4 sigma_k^2 + E[lambda_k]^2))`.
///
/// `sigmas[k]` is the sub-Gaussian parameter of `lambda_k - E lambda_k`.
/// Requires `delta < 1/6` so the logarithm is positive.
pub fn theorem1_tau(
    n: usize,
    delta: f64,
    sigmas: &[f64],
    e_lambdas: &[f64],
) -> Result<f64, ConformalError> {
    if n == 0 {
        return Err(ConformalError::OutOfRange {
            name: "N",
            value: 0.0,
            reason: "need at least one calibration point",
        });
    }
    if !(delta > 0.0 && delta < 1.0 / 6.0) {
        return Err(ConformalError::OutOfRange {
            name: "delta",
            value: delta,
            reason: "must lie in (0, 1/6)",
        });
    }
    if sigmas.len() != n || e_lambdas.len() != n {
        return Err(ConformalError::OutOfRange {
            name: "moment list length",
            value: sigmas.len().min(e_lambdas.len()) as f64,
            reason: "need one sigma and one E[lambda] per calibration point",
        });
    }
    if sigmas.iter().chain(e_lambdas).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ConformalError::OutOfRange {
            name: "moment",
            value: f64::NAN,
            reason: "sigmas and E[lambda] must be finite and nonnegative",
        });
    }
    let spread: f64 = sigmas
        .iter()
        .zip(e_lambdas)
        .map(|(s, e)| 4.0 * s * s + e * e)
        .sum();
    Ok((8.0 * (1.0 / (6.0 * delta)).ln() * spread).sqrt() / n as f64)
}

/// Sandwich on `alpha(D_N) - alpha`:
/// `(-(tau + 3 E/N) / (1 + E/N), tau + sup_atom)` with `E = E[lambda_{N+1}]`
/// and `sup_atom = sup_v P(V_{N+1} = v)`.
pub fn theorem1_sandwich(tau: f64, n: usize, e_lambda_test: f64, sup_atom: f64) -> (f64, f64) {
    let r = e_lambda_test / n as f64;
    (-(tau + 3.0 * r) / (1.0 + r), tau + sup_atom)
}

/// `19 sigma sqrt(ln(4N) / N) + 18 E[lambda^2] / N`.
pub fn theorem2_bias_bound(n: usize, sigma: f64, e_lambda_sq: f64) -> Result<f64, ConformalError> {
    if n == 0 {
        return Err(ConformalError::OutOfRange {
            name: "N",
            value: 0.0,
            reason: "need at least one calibration point",
        });
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(ConformalError::OutOfRange {
            name: "sigma",
            value: sigma,
            reason: "must be finite and nonnegative",
        });
    }
    // E[lambda^2] >= (E lambda)^2 = 1
    if !(e_lambda_sq >= 1.0) || !e_lambda_sq.is_finite() {
        return Err(ConformalError::OutOfRange {
            name: "E[lambda^2]",
            value: e_lambda_sq,
            reason: "must be at least 1",
        });
    }
    let nf = n as f64;
    Ok(19.0 * sigma * ((4.0 * nf).ln() / nf).sqrt() + 18.0 * e_lambda_sq / nf)
}

/// Moments feeding the bound calculators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub delta: f64,
    pub sigmas: Vec<f64>,
    pub e_lambdas: Vec<f64>,
    /// `E[lambda(Z_{N+1})]` for the test point.
    pub e_lambda_test: f64,
    /// Sub-Gaussian parameter of `lambda 1{V < v}` for the bias bound.
    pub sigma_indicator: f64,
    pub e_lambda_sq: f64,
    /// `sup_v P(V_{N+1} = v)`; zero for continuous scores.
    pub sup_atom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub tau: f64,
    pub lower: f64,
    pub upper: f64,
    pub bias_bound: f64,
    pub inputs: BoundInputs,
}

impl BoundReport {
    pub fn compute(inputs: BoundInputs) -> Result<Self, ConformalError> {
        let tau = theorem1_tau(inputs.n, inputs.delta, &inputs.sigmas, &inputs.e_lambdas)?;
        let (lower, upper) = theorem1_sandwich(tau, inputs.n, inputs.e_lambda_test, inputs.sup_atom);
        let bias_bound = theorem2_bias_bound(inputs.n, inputs.sigma_indicator, inputs.e_lambda_sq)?;
        Ok(Self {
            tau,
            lower,
            upper,
            bias_bound,
            inputs,
        })
    }

    /// Whether `miscoverage - alpha` falls strictly inside the sandwich.
    pub fn contains(&self, miscoverage: f64, alpha: f64) -> bool {
        let dev = miscoverage - alpha;
        dev > self.lower && dev < self.upper
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tau_collapses_without_spread() {
        for (n, delta) in [(10usize, 0.05), (100, 0.01), (1, 0.1)] {
            let tau = theorem1_tau(n, delta, &vec![0.0; n], &vec![1.0; n]).unwrap();
            let expected = (8.0 * (1.0 / (6.0 * delta)).ln() / n as f64).sqrt();
            assert_abs_diff_eq!(tau, expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn tau_reference_value() {
        // sqrt(16 ln(10/3) / 100), evaluated independently
        let tau = theorem1_tau(100, 0.05, &[0.5; 100], &[1.0; 100]).unwrap();
        assert_abs_diff_eq!(tau, 0.438_902_778_2, epsilon = 1e-9);
    }

    #[test]
    fn tau_is_homogeneous() {
        let s = [0.3, 0.7, 1.1];
        let e = [0.5, 1.0, 1.5];
        let t1 = theorem1_tau(3, 0.02, &s, &e).unwrap();
        let t2 = theorem1_tau(3, 0.02, &s.map(|v| 2.0 * v), &e.map(|v| 2.0 * v)).unwrap();
        assert_abs_diff_eq!(t2, 2.0 * t1, epsilon = 1e-14);
    }

    #[test]
    fn tau_rejects_large_delta() {
        assert!(matches!(
            theorem1_tau(10, 1.0 / 6.0, &[0.0; 10], &[1.0; 10]),
            Err(ConformalError::OutOfRange { name: "delta", .. })
        ));
        assert!(theorem1_tau(10, 0.2, &[0.0; 10], &[1.0; 10]).is_err());
        assert!(theorem1_tau(10, 0.05, &[0.0; 9], &[1.0; 10]).is_err());
    }

    #[test]
    fn bias_bound_examples() {
        assert_abs_diff_eq!(theorem2_bias_bound(18, 0.0, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        // 19 sqrt(ln 1600 / 400) + 36/400, evaluated independently
        assert_abs_diff_eq!(theorem2_bias_bound(400, 1.0, 2.0).unwrap(), 2.670_392_879_9, epsilon = 1e-9);
        assert!(theorem2_bias_bound(10, 1.0, 0.5).is_err());
        assert!(theorem2_bias_bound(0, 1.0, 1.0).is_err());
        assert!(theorem2_bias_bound(10, -1.0, 1.0).is_err());
    }

    #[test]
    fn bias_bound_nonincreasing_in_n() {
        for &(sigma, el2) in &[(0.0, 1.0), (0.5, 1.5), (1.0, 2.0), (3.0, 10.0)] {
            let mut prev = theorem2_bias_bound(2, sigma, el2).unwrap();
            let mut n = 3usize;
            while n <= 1_000_000 {
                let b = theorem2_bias_bound(n, sigma, el2).unwrap();
                assert!(b <= prev + 1e-15, "n={n} sigma={sigma}");
                prev = b;
                n = if n < 1000 { n + 1 } else { n + n / 100 };
            }
        }
    }

    #[test]
    fn sandwich_and_report() {
        let (lo, hi) = theorem1_sandwich(0.1, 100, 1.0, 0.0);
        assert_abs_diff_eq!(lo, -(0.1 + 0.03) / 1.01, epsilon = 1e-15);
        assert_eq!(hi, 0.1);

        let report = BoundReport::compute(BoundInputs {
            n: 100,
            delta: 0.05,
            sigmas: vec![0.0; 100],
            e_lambdas: vec![1.0; 100],
            e_lambda_test: 1.0,
            sigma_indicator: 0.0,
            e_lambda_sq: 1.0,
            sup_atom: 0.0,
        })
        .unwrap();
        assert_abs_diff_eq!(report.tau, (8.0 * (10.0f64 / 3.0).ln() / 100.0).sqrt(), epsilon = 1e-14);
        assert!(report.contains(0.1, 0.1));
        assert!(!report.contains(0.1 + report.tau, 0.1));
        assert_abs_diff_eq!(report.bias_bound, 0.18, epsilon = 1e-15);
    }
}
