//! One-dimensional covariate-shift benchmark.
//!
//! Covariates come from `P1 = N(3, 2)` or `P2 = N(5, 2)` (second parameter is
//! the variance), responses follow `Y = (1 + 0.1|X|) sin X + eps`. The
//! regressor is trained on `P1`, test points come from `P2`, and the
//! calibration set is drawn from `P1`, `P2` or an 80/20 mix of the two.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use fedcp_core::ratio::{fit_gmm_params, GaussianSpec, GmmClassParams, RatioError, RatioModel};
use fedcp_core::seed::derive_seed;

use crate::HarnessError;

const STREAM_TRAIN: u64 = 11;
const STREAM_TEST: u64 = 12;
const STREAM_CAL: u64 = 13;
const STREAM_GMM: u64 = 14;

/// The regression function without noise.
pub fn true_curve(x: f64) -> f64 {
    (1.0 + 0.1 * x.abs()) * x.sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: f64,
    pub variance: f64,
}

impl Component {
    pub fn gaussian(&self) -> Result<GaussianSpec, RatioError> {
        GaussianSpec::univariate(self.mean, self.variance)
    }

    fn sampler(&self) -> Normal<f64> {
        Normal::new(self.mean, self.variance.sqrt()).expect("validated variance")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub p1: Component,
    pub p2: Component,
    /// Calibration points from `P1` in the mix.
    pub n1: usize,
    /// Calibration points from `P2` in the mix.
    pub n2: usize,
    pub noise_std: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// Unlabeled covariates each agent draws to fit its Gaussian model.
    pub gmm_fit_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            p1: Component {
                mean: 3.0,
                variance: 2.0,
            },
            p2: Component {
                mean: 5.0,
                variance: 2.0,
            },
            n1: 80,
            n2: 20,
            noise_std: 0.5,
            train_size: 150,
            test_size: 20,
            gmm_fit_size: 1000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        for c in [self.p1, self.p2] {
            if !(c.variance > 0.0) || !c.variance.is_finite() || !c.mean.is_finite() {
                return bad("component variances must be positive and finite");
            }
        }
        if self.n1 + self.n2 == 0 || self.train_size < 2 || self.test_size == 0 || self.gmm_fit_size < 2 {
            return bad("sizes must be at least 1 (train and GMM fits at least 2)");
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad("noise std must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn calibration_size(&self) -> usize {
        self.n1 + self.n2
    }

    /// Mixture weights of `P1` and `P2` in the calibration law of `source`.
    pub fn source_weights(&self, source: CalibrationSource) -> (f64, f64) {
        match source {
            CalibrationSource::P1 => (1.0, 0.0),
            CalibrationSource::P2 => (0.0, 1.0),
            CalibrationSource::Mix => {
                let n = self.calibration_size() as f64;
                (self.n1 as f64 / n, self.n2 as f64 / n)
            }
        }
    }

    /// Calibration counts per component: all from one component for the pure
    /// sources, `(n1, n2)` for the mix.
    pub fn source_counts(&self, source: CalibrationSource) -> (usize, usize) {
        match source {
            CalibrationSource::P1 => (self.calibration_size(), 0),
            CalibrationSource::P2 => (0, self.calibration_size()),
            CalibrationSource::Mix => (self.n1, self.n2),
        }
    }

    /// `lambda(x) = p2(x) / (w1 p1(x) + w2 p2(x))`.
    pub fn exact_ratio(&self, source: CalibrationSource) -> Result<RatioModel, HarnessError> {
        let (w1, w2) = self.source_weights(source);
        let mut cal = Vec::new();
        if w1 > 0.0 {
            cal.push((w1, self.p1.gaussian()?));
        }
        if w2 > 0.0 {
            cal.push((w2, self.p2.gaussian()?));
        }
        Ok(RatioModel::exact(vec![(1.0, self.p2.gaussian()?)], cal)?)
    }

    /// Ratio of `P2` to the P1-only law, the weight an i.i.d. analysis would
    /// use when it assumes calibration data came from `P1`.
    pub fn iid_ratio(&self) -> Result<RatioModel, HarnessError> {
        self.exact_ratio(CalibrationSource::P1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationSource {
    P1,
    P2,
    Mix,
}

impl CalibrationSource {
    pub const ALL: [CalibrationSource; 3] = [CalibrationSource::P1, CalibrationSource::P2, CalibrationSource::Mix];

    fn stream(self) -> u64 {
        match self {
            CalibrationSource::P1 => 1,
            CalibrationSource::P2 => 2,
            CalibrationSource::Mix => 3,
        }
    }
}

impl fmt::Display for CalibrationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationSource::P1 => "p1",
            CalibrationSource::P2 => "p2",
            CalibrationSource::Mix => "mix",
        })
    }
}

impl FromStr for CalibrationSource {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(CalibrationSource::P1),
            "p2" => Ok(CalibrationSource::P2),
            "mix" => Ok(CalibrationSource::Mix),
            other => Err(HarnessError::Parse(format!("unknown calibration source {other:?}"))),
        }
    }
}

/// Labeled points; `origin[i]` is 0 for `P1` and 1 for `P2`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub origin: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    fn extend(&mut self, other: Dataset) {
        self.xs.extend(other.xs);
        self.ys.extend(other.ys);
        self.origin.extend(other.origin);
    }
}

fn draw(spec: &SyntheticSpec, component: u8, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let c = if component == 0 { spec.p1 } else { spec.p2 };
    let xdist = c.sampler();
    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("validated"));
    let mut data = Dataset::default();
    for _ in 0..n {
        let x = xdist.sample(rng);
        let eps = noise.as_ref().map_or(0.0, |d| d.sample(rng));
        data.xs.push(x);
        data.ys.push(true_curve(x) + eps);
        data.origin.push(component);
    }
    data
}

fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Training points from `P1`.
pub fn sample_train(spec: &SyntheticSpec, seed: u64) -> Dataset {
    draw(spec, 0, spec.train_size, &mut rng_for(seed, &[STREAM_TRAIN]))
}

/// Test points from `P2`.
pub fn sample_test(spec: &SyntheticSpec, seed: u64, n: usize) -> Dataset {
    draw(spec, 1, n, &mut rng_for(seed, &[STREAM_TEST]))
}

/// Calibration points for `source`; the `P1` block comes first in the mix.
pub fn sample_calibration(spec: &SyntheticSpec, seed: u64, source: CalibrationSource) -> Dataset {
    let (c1, c2) = spec.source_counts(source);
    let mut data = draw(spec, 0, c1, &mut rng_for(seed, &[STREAM_CAL, source.stream(), 0]));
    data.extend(draw(spec, 1, c2, &mut rng_for(seed, &[STREAM_CAL, source.stream(), 1])));
    data
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub train: Dataset,
    pub calibration: Dataset,
    pub test: Dataset,
}

/// Training, calibration and test sets for one replication. Each part has its
/// own random stream, so changing the source leaves train and test intact.
pub fn sample_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
    source: CalibrationSource,
) -> Result<SyntheticSample, HarnessError> {
    spec.validate()?;
    Ok(SyntheticSample {
        train: sample_train(spec, seed),
        calibration: sample_calibration(spec, seed, source),
        test: sample_test(spec, seed, spec.test_size),
    })
}

fn fit_component(spec: &SyntheticSpec, agent_id: usize, component: u8, seed: u64) -> Result<GmmClassParams, HarnessError> {
    let data = draw(spec, component, spec.gmm_fit_size, &mut rng_for(seed, &[STREAM_GMM, agent_id as u64]));
    let features: Vec<Vec<f64>> = data.xs.iter().map(|&x| vec![x]).collect();
    let labels = vec![0; features.len()];
    Ok(fit_gmm_params(agent_id, &features, &labels)?)
}

/// GMM-estimated ratio for `source`.
///
/// Each calibration component acts as one agent fitting a Gaussian to
/// `gmm_fit_size` unlabeled covariates of its own law; agent shares follow
/// the calibration counts. The target model is fitted the same way on `P2`.
pub fn gmm_ratio(spec: &SyntheticSpec, source: CalibrationSource, seed: u64) -> Result<RatioModel, HarnessError> {
    let (c1, c2) = spec.source_counts(source);
    let mut agents = Vec::new();
    for (agent_id, (component, count)) in [(0u8, c1), (1u8, c2)].into_iter().enumerate() {
        if count > 0 {
            let mut params = fit_component(spec, agent_id, component, seed)?;
            params.n_i = count;
            agents.push(params);
        }
    }
    let target = fit_component(spec, 2, 1, seed)?;
    Ok(RatioModel::from_gmm(&target, &agents)?)
}
