//! Monte Carlo checks of the coverage laws and the deviation bounds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal as StatNormal};
use statrs::function::erf::erfc;

use fedcp_core::conformal::{
    scp_threshold, BoundInputs, BoundReport, CalibrationRecord, ConformalError, WeightedCalibration,
};
use fedcp_core::ratio::RatioModel;
use fedcp_core::scoring::{abs_residual_score, train_regressor_with, RegressionPredictor, Score};
use fedcp_core::seed::derive_seed;
use fedcp_core::Extended;

use crate::experiment::{default_train_config, replication_seed, sample_std};
use crate::synthetic::{gmm_ratio, sample_calibration, sample_test, sample_train, CalibrationSource, SyntheticSpec};
use crate::HarnessError;

const STREAM_MODEL: u64 = 31;
const STREAM_EXCH: u64 = 32;
const STREAM_MOMENTS: u64 = 33;

/// Regressor trained once on `P1` data; conditioning on it keeps the
/// calibration and test scores exchangeable.
pub fn fixed_predictor(spec: &SyntheticSpec, seed: u64) -> Result<RegressionPredictor, HarnessError> {
    let train = sample_train(spec, derive_seed(seed, &[STREAM_MODEL]));
    Ok(train_regressor_with(
        &train.xs,
        &train.ys,
        &default_train_config(),
        derive_seed(seed, &[STREAM_MODEL, 1]),
    )?)
}

/// `Beta(ceil((N+1) alpha), ceil((N+1)(1-alpha)))` parameters.
pub fn beta_reference(n: usize, alpha: f64) -> (f64, f64) {
    let m = (n + 1) as f64;
    // guard against products like 100 * 0.1 landing just above an integer
    let a = (m * alpha - 1e-9).ceil();
    let b = (m * (1.0 - alpha) - 1e-9).ceil();
    (a, b)
}

/// Largest gap between the empirical CDF of `samples` and `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j < s.len() && s[j] == s[i] {
            j += 1;
        }
        let f = cdf(s[i]);
        d = d.max((f - i as f64 / n).abs()).max((f - j as f64 / n).abs());
        i = j;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BetaMode {
    /// Scores are `|eps|` under the true regression curve, so the conditional
    /// miscoverage is `erfc(t / (s sqrt 2))` in closed form.
    Exact,
    /// Scores from a fixed trained regressor on `P2`; miscoverage estimated on
    /// a fresh test pool per replication.
    Pool { pool_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaCheckReport {
    pub n: usize,
    pub alpha: f64,
    pub replications: usize,
    pub mode: BetaMode,
    pub empirical_mean: f64,
    pub empirical_std: f64,
    pub reference_a: f64,
    pub reference_b: f64,
    pub reference_mean: f64,
    pub reference_std: f64,
    pub ks_distance: f64,
    pub miscoverages: Vec<f64>,
}

impl BetaCheckReport {
    pub fn mean_standard_error(&self) -> f64 {
        self.reference_std / (self.replications as f64).sqrt()
    }
}

/// Conditional miscoverage of split conformal in an exchangeable setting,
/// compared with its Beta law.
pub fn beta_law_check(
    spec: &SyntheticSpec,
    n: usize,
    alpha: f64,
    replications: usize,
    seed: u64,
    mode: BetaMode,
) -> Result<BetaCheckReport, HarnessError> {
    if n == 0 || replications == 0 {
        return Err(HarnessError::InvalidSpec("need N >= 1 and at least one replication".into()));
    }
    let predictor = match mode {
        BetaMode::Pool { pool_size } if pool_size == 0 => {
            return Err(HarnessError::InvalidSpec("empty test pool".into()))
        }
        BetaMode::Pool { .. } => Some(fixed_predictor(spec, seed)?),
        BetaMode::Exact => {
            if !(spec.noise_std > 0.0) {
                return Err(HarnessError::InvalidSpec("exact mode needs positive noise".into()));
            }
            None
        }
    };
    let sigma = spec.noise_std;
    let one = |i: usize| -> Result<f64, HarnessError> {
        let rep = replication_seed(seed, i);
        match (mode, &predictor) {
            (BetaMode::Pool { pool_size }, Some(model)) => {
                let mut cal_spec = spec.clone();
                cal_spec.n1 = 0;
                cal_spec.n2 = n;
                let cal = sample_calibration(&cal_spec, rep, CalibrationSource::P2);
                let records = residual_records(model, &cal.xs, &cal.ys, |_| Ok(1.0))?;
                let t = scp_threshold(&records, alpha)?;
                let pool = sample_test(spec, rep, pool_size);
                let missed = pool
                    .xs
                    .iter()
                    .zip(&pool.ys)
                    .filter(|(&x, &y)| !covers(t, model.predict(x), y))
                    .count();
                Ok(missed as f64 / pool_size as f64)
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rep, &[STREAM_EXCH]));
                let noise = Normal::new(0.0, sigma).expect("positive sigma");
                let records: Vec<CalibrationRecord> = (0..n)
                    .map(|_| {
                        let e: f64 = noise.sample(&mut rng);
                        CalibrationRecord::bare(Score::new(e.abs()).expect("finite"), 1.0)
                    })
                    .collect();
                Ok(match scp_threshold(&records, alpha)? {
                    Extended::Infinity => 0.0,
                    Extended::Finite(t) => erfc(t / (sigma * std::f64::consts::SQRT_2)),
                })
            }
        }
    };
    let miscoverages: Vec<f64> = (0..replications).into_par_iter().map(one).collect::<Result<_, _>>()?;

    let (a, b) = beta_reference(n, alpha);
    let beta = Beta::new(a, b).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
    let reference_mean = a / (a + b);
    let reference_std = (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt();
    let mut sorted = miscoverages.clone();
    sorted.sort_by(f64::total_cmp);
    let empirical_mean = sorted.iter().sum::<f64>() / replications as f64;
    Ok(BetaCheckReport {
        n,
        alpha,
        replications,
        mode,
        empirical_mean,
        empirical_std: sample_std(&miscoverages),
        reference_a: a,
        reference_b: b,
        reference_mean,
        reference_std,
        ks_distance: ks_distance(&miscoverages, |x| beta.cdf(x)),
        miscoverages,
    })
}

fn covers(t: Extended, pred: f64, y: f64) -> bool {
    match t {
        Extended::Infinity => true,
        Extended::Finite(t) => (y - pred).abs() <= t,
    }
}

fn residual_records(
    model: &RegressionPredictor,
    xs: &[f64],
    ys: &[f64],
    ratio: impl Fn(f64) -> Result<f64, HarnessError>,
) -> Result<Vec<CalibrationRecord>, HarnessError> {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| Ok(CalibrationRecord::bare(abs_residual_score(model.predict(x), y), ratio(x)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub n: usize,
    pub alpha: f64,
    pub draws: usize,
    pub coverage: f64,
    pub standard_error: f64,
    /// `1 - alpha`.
    pub lower: f64,
    /// `1 - alpha + 1/(N+1)`.
    pub upper: f64,
}

impl MarginalReport {
    /// Whether the coverage lies in `[lower, upper]` widened by `k` standard
    /// errors.
    pub fn within(&self, k: f64) -> bool {
        self.coverage >= self.lower - k * self.standard_error && self.coverage <= self.upper + k * self.standard_error
    }
}

/// Marginal coverage of split conformal over fresh exchangeable
/// `(calibration, test point)` draws from `P2` with a fixed regressor.
pub fn marginal_coverage_check(
    spec: &SyntheticSpec,
    n: usize,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<MarginalReport, HarnessError> {
    if n == 0 || draws == 0 {
        return Err(HarnessError::InvalidSpec("need N >= 1 and at least one draw".into()));
    }
    let model = fixed_predictor(spec, seed)?;
    let mut cal_spec = spec.clone();
    cal_spec.n1 = 0;
    cal_spec.n2 = n;
    let hits: Vec<bool> = (0..draws)
        .into_par_iter()
        .map(|i| -> Result<bool, HarnessError> {
            let rep = replication_seed(seed, i);
            let cal = sample_calibration(&cal_spec, rep, CalibrationSource::P2);
            let records = residual_records(&model, &cal.xs, &cal.ys, |_| Ok(1.0))?;
            let t = scp_threshold(&records, alpha)?;
            let test = sample_test(spec, rep, 1);
            Ok(covers(t, model.predict(test.xs[0]), test.ys[0]))
        })
        .collect::<Result<_, _>>()?;
    let coverage = hits.iter().filter(|&&h| h).count() as f64 / draws as f64;
    Ok(MarginalReport {
        n,
        alpha,
        draws,
        coverage,
        standard_error: (coverage * (1.0 - coverage) / draws as f64).sqrt(),
        lower: 1.0 - alpha,
        upper: 1.0 - alpha + 1.0 / (n + 1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckConfig {
    pub spec: SyntheticSpec,
    pub source: CalibrationSource,
    /// Calibration size; the mix keeps the spec's P1/P2 proportions.
    pub n: usize,
    pub alpha: f64,
    pub delta: f64,
    pub replications: usize,
    pub pool_size: usize,
    pub moment_samples: usize,
    pub seed: u64,
}

impl BoundCheckConfig {
    pub fn new(source: CalibrationSource, n: usize, delta: f64, replications: usize, seed: u64) -> Self {
        Self {
            spec: SyntheticSpec::default(),
            source,
            n,
            alpha: 0.1,
            delta,
            replications,
            pool_size: 2000,
            moment_samples: 100_000,
            seed,
        }
    }

    fn calibration_spec(&self) -> SyntheticSpec {
        let mut spec = self.spec.clone();
        let share = spec.n1 as f64 / spec.calibration_size() as f64;
        spec.n1 = (share * self.n as f64).round() as usize;
        spec.n2 = self.n - spec.n1;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub bound: BoundReport,
    pub replications: usize,
    /// Replications with `alpha(D_N) - alpha <= lower`.
    pub lower_violations: usize,
    /// Replications with `alpha(D_N) - alpha >= upper`.
    pub upper_violations: usize,
    /// `delta + 3 sqrt(delta (1 - delta) / R)`.
    pub tolerance: f64,
    pub mean_miscoverage: f64,
    pub passed: bool,
}

impl BoundCheckReport {
    pub fn lower_fraction(&self) -> f64 {
        self.lower_violations as f64 / self.replications as f64
    }

    pub fn upper_fraction(&self) -> f64 {
        self.upper_violations as f64 / self.replications as f64
    }
}

/// Half the range of `lambda` over `mean +/- 8 sd` of a component, the
/// Hoeffding sub-Gaussian parameter of a variable confined to that range.
fn half_range(ratio: &RatioModel, mean: f64, variance: f64) -> Result<f64, HarnessError> {
    let sd = variance.sqrt();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..=4000 {
        let x = mean - 8.0 * sd + 16.0 * sd * i as f64 / 4000.0;
        let r = ratio.ratio_at(&[x])?;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Ok(0.5 * (hi - lo))
}

fn component_moments(
    ratio: &RatioModel,
    mean: f64,
    variance: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(mean, variance.sqrt()).expect("positive variance");
    let (mut m1, mut m2) = (0.0, 0.0);
    for _ in 0..samples {
        let r = ratio.ratio_at(&[d.sample(&mut rng)])?;
        m1 += r;
        m2 += r * r;
    }
    Ok((m1 / samples as f64, m2 / samples as f64))
}

/// Checks how often the conditional miscoverage of the weighted method
/// leaves the high-probability sandwich.
pub fn bound_check(config: &BoundCheckConfig) -> Result<BoundCheckReport, HarnessError> {
    if !(config.delta > 0.0 && config.delta < 1.0 / 6.0) {
        return Err(ConformalError::OutOfRange {
            name: "delta",
            value: config.delta,
            reason: "must lie in (0, 1/6)",
        }
        .into());
    }
    if config.n == 0 || config.replications == 0 || config.pool_size == 0 || config.moment_samples == 0 {
        return Err(HarnessError::InvalidSpec("sizes must be positive".into()));
    }
    let spec = config.calibration_spec();
    spec.validate()?;
    let ratio = spec.exact_ratio(config.source)?;
    let (c1, c2) = spec.source_counts(config.source);
    let ms = |k: u64| derive_seed(config.seed, &[STREAM_MOMENTS, k]);
    let (e1, e1_sq) = component_moments(&ratio, spec.p1.mean, spec.p1.variance, config.moment_samples, ms(0))?;
    let (e2, e2_sq) = component_moments(&ratio, spec.p2.mean, spec.p2.variance, config.moment_samples, ms(1))?;
    let s1 = half_range(&ratio, spec.p1.mean, spec.p1.variance)?;
    let s2 = half_range(&ratio, spec.p2.mean, spec.p2.variance)?;

    let mut sigmas = vec![s1; c1];
    sigmas.extend(vec![s2; c2]);
    let mut e_lambdas = vec![e1; c1];
    e_lambdas.extend(vec![e2; c2]);
    let n = (c1 + c2) as f64;
    let sup = [(c1, s1), (c2, s2)]
        .iter()
        .filter(|(c, _)| *c > 0)
        .map(|(_, s)| *s)
        .fold(0.0, f64::max);
    let inputs = BoundInputs {
        n: c1 + c2,
        delta: config.delta,
        sigmas,
        e_lambdas,
        e_lambda_test: e2,
        sigma_indicator: sup.max(0.5),
        e_lambda_sq: ((c1 as f64 * e1_sq + c2 as f64 * e2_sq) / n).max(1.0),
        sup_atom: 0.0,
    };
    let bound = BoundReport::compute(inputs)?;

    let model = fixed_predictor(&spec, config.seed)?;
    let alpha = config.alpha;
    let miscoverages: Vec<f64> = (0..config.replications)
        .into_par_iter()
        .map(|i| -> Result<f64, HarnessError> {
            let rep = replication_seed(config.seed, i);
            let cal = sample_calibration(&spec, rep, config.source);
            let records = residual_records(&model, &cal.xs, &cal.ys, |x| Ok(ratio.ratio_at(&[x])?))?;
            let wc = WeightedCalibration::new(&records)?;
            let pool = sample_test(&spec, rep, config.pool_size);
            let mut missed = 0usize;
            for (&x, &y) in pool.xs.iter().zip(&pool.ys) {
                let t = wc.threshold(ratio.ratio_at(&[x])?, alpha)?;
                if !covers(t, model.predict(x), y) {
                    missed += 1;
                }
            }
            Ok(missed as f64 / config.pool_size as f64)
        })
        .collect::<Result<_, _>>()?;

    let lower_violations = miscoverages.iter().filter(|&&m| m - alpha <= bound.lower).count();
    let upper_violations = miscoverages.iter().filter(|&&m| m - alpha >= bound.upper).count();
    let r = config.replications as f64;
    let tolerance = config.delta + 3.0 * (config.delta * (1.0 - config.delta) / r).sqrt();
    let mut sorted = miscoverages.clone();
    sorted.sort_by(f64::total_cmp);
    let passed = lower_violations as f64 / r <= tolerance && upper_violations as f64 / r <= tolerance;
    Ok(BoundCheckReport {
        bound,
        replications: config.replications,
        lower_violations,
        upper_violations,
        tolerance,
        mean_miscoverage: sorted.iter().sum::<f64>() / r,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSanityReport {
    /// Central interval of the calibration law checked.
    pub lower: f64,
    pub upper: f64,
    pub grid_points: usize,
    pub max_relative_error: f64,
}

/// Largest `|lambda_hat / lambda - 1|` over the central `mass` of the
/// calibration law of `source`.
pub fn gmm_ratio_sanity(
    spec: &SyntheticSpec,
    source: CalibrationSource,
    mass: f64,
    seed: u64,
) -> Result<GmmSanityReport, HarnessError> {
    let exact = spec.exact_ratio(source)?;
    let estimated = gmm_ratio(spec, source, seed)?;
    let (w1, w2) = spec.source_weights(source);
    let n1 = StatNormal::new(spec.p1.mean, spec.p1.variance.sqrt()).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
    let n2 = StatNormal::new(spec.p2.mean, spec.p2.variance.sqrt()).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
    let cdf = |x: f64| w1 * n1.cdf(x) + w2 * n2.cdf(x);
    let quantile = |p: f64| {
        let (mut lo, mut hi) = (-1e3, 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let tail = 0.5 * (1.0 - mass);
    let (lower, upper) = (quantile(tail), quantile(1.0 - tail));
    let grid_points = 1001;
    let mut max_relative_error: f64 = 0.0;
    for i in 0..grid_points {
        let x = lower + (upper - lower) * i as f64 / (grid_points - 1) as f64;
        let truth = exact.ratio_at(&[x])?;
        let est = estimated.ratio_at(&[x])?;
        max_relative_error = max_relative_error.max((est / truth - 1.0).abs());
    }
    Ok(GmmSanityReport {
        lower,
        upper,
        grid_points,
        max_relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_reference_parameters() {
        assert_eq!(beta_reference(99, 0.1), (10.0, 90.0));
        assert_eq!(beta_reference(9, 0.5), (5.0, 5.0));
        assert_eq!(beta_reference(100, 0.1), (11.0, 91.0));
    }

    #[test]
    fn ks_of_uniform_grid() {
        let s: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_distance(&s, |x| x) - 0.005).abs() < 1e-12);
        assert!((ks_distance(&[0.5, 0.5], |x| x) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_large_delta() {
        let c = BoundCheckConfig::new(CalibrationSource::Mix, 100, 0.2, 10, 0);
        assert!(matches!(
            bound_check(&c),
            Err(HarnessError::Conformal(ConformalError::OutOfRange { name: "delta", .. }))
        ));
    }

    #[test]
    fn exchangeable_tau_collapses() {
        let mut c = BoundCheckConfig::new(CalibrationSource::P2, 100, 0.05, 20, 3);
        c.pool_size = 200;
        c.moment_samples = 1000;
        let report = bound_check(&c).unwrap();
        let expected = (8.0 * (1.0 / 0.3f64).ln() / 100.0).sqrt();
        assert!((report.bound.tau - expected).abs() < 1e-12);
        assert_eq!(report.lower_violations + report.upper_violations, 0);
    }
}
