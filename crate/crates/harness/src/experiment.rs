//! Monte Carlo replication engine for the synthetic benchmark.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fedcp_core::conformal::{
    approx_global_threshold, scp_threshold, tibshirani_iid_threshold, CalibrationRecord, WeightedCalibration,
};
use fedcp_core::ratio::RatioModel;
use fedcp_core::scoring::{abs_residual_score, train_regressor_with, RegressionPredictor, TrainConfig};
use fedcp_core::seed::derive_seed;
use fedcp_core::Extended;
use fedcp_fedsim::{run_federation, AgentState, FederationConfig, Participation};

use crate::format::sig6;
use crate::synthetic::{gmm_ratio, sample_calibration, sample_test, sample_train, CalibrationSource, Dataset, SyntheticSpec};
use crate::HarnessError;

const STREAM_MODEL: u64 = 21;
const STREAM_FED: u64 = 22;

/// Odd multiplier for per-replication seeds.
pub const REPLICATION_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn replication_seed(base_seed: u64, index: usize) -> u64 {
    base_seed ^ (index as u64).wrapping_mul(REPLICATION_SEED_STRIDE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Split conformal with uniform weights.
    Classic,
    /// Weighted quantile with the true density ratio.
    WeightedExact,
    /// Weighted quantile with the GMM-estimated ratio.
    WeightedGmm,
    /// I.i.d. likelihood-ratio weighting with `dP2/dP1`.
    TibshiraniIid,
    /// Query-independent weighted quantile without the infinity atom.
    ApproxGlobal,
    /// Federated smoothed-quantile estimate with GMM ratios.
    Federated,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Classic,
        Method::WeightedExact,
        Method::WeightedGmm,
        Method::TibshiraniIid,
        Method::ApproxGlobal,
        Method::Federated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Classic => "classic",
            Method::WeightedExact => "weighted-exact",
            Method::WeightedGmm => "weighted-gmm",
            Method::TibshiraniIid => "tibshirani-iid",
            Method::ApproxGlobal => "approx-global",
            Method::Federated => "federated",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "weighted" && *m == Method::WeightedExact))
            .ok_or_else(|| HarnessError::Parse(format!("unknown method {s:?}")))
    }
}

/// A method evaluated on calibration data from one source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arm {
    pub source: CalibrationSource,
    pub method: Method,
}

impl Arm {
    pub fn new(source: CalibrationSource, method: Method) -> Self {
        Self { source, method }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.method, self.source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedArmConfig {
    pub gamma: f64,
    pub rounds: usize,
    pub local_steps: usize,
    /// Defaults to `gamma / 2`.
    pub learning_rate: Option<f64>,
    pub dp_sigma: f64,
    pub participation: Participation,
}

impl Default for FedArmConfig {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            rounds: 2000,
            local_steps: 10,
            learning_rate: None,
            dp_sigma: 0.0,
            participation: Participation::Fraction(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub spec: SyntheticSpec,
    pub arms: Vec<Arm>,
    pub alpha: f64,
    pub replications: usize,
    pub base_seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub parallelism: usize,
    pub train: TrainConfig,
    pub fed: FedArmConfig,
}

impl ExperimentConfig {
    pub fn new(arms: Vec<Arm>, replications: usize, base_seed: u64) -> Self {
        Self {
            spec: SyntheticSpec::default(),
            arms,
            alpha: 0.1,
            replications,
            base_seed,
            parallelism: 0,
            train: default_train_config(),
            fed: FedArmConfig::default(),
        }
    }
}

/// Regressor settings used by the synthetic benchmark.
pub fn default_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 3000,
        learning_rate: 0.05,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub replication_id: usize,
    pub method: Method,
    pub source: CalibrationSource,
    /// Share of test points inside their interval.
    pub coverage: f64,
    /// Mean interval width over the test points; infinite if any interval is.
    pub mean_width: f64,
    pub infinite_fraction: f64,
    /// `1 - coverage` on the same test points.
    pub miscoverage: f64,
}

/// Per-replication state shared by all arms: the trained regressor, the test
/// points and the calibration sets.
pub struct ReplicationContext<'a> {
    config: &'a ExperimentConfig,
    exact: &'a BTreeMap<CalibrationSource, RatioModel>,
    iid: &'a RatioModel,
    seed: u64,
    model: RegressionPredictor,
    test: Dataset,
    test_preds: Vec<f64>,
}

/// Ratio models that do not depend on the replication seed.
pub struct SharedModels {
    exact: BTreeMap<CalibrationSource, RatioModel>,
    iid: RatioModel,
}

impl SharedModels {
    pub fn new(spec: &SyntheticSpec) -> Result<Self, HarnessError> {
        let mut exact = BTreeMap::new();
        for source in CalibrationSource::ALL {
            exact.insert(source, spec.exact_ratio(source)?);
        }
        Ok(Self {
            exact,
            iid: spec.iid_ratio()?,
        })
    }
}

impl<'a> ReplicationContext<'a> {
    pub fn new(config: &'a ExperimentConfig, shared: &'a SharedModels, seed: u64) -> Result<Self, HarnessError> {
        let spec = &config.spec;
        let train = sample_train(spec, seed);
        let model = train_regressor_with(&train.xs, &train.ys, &config.train, derive_seed(seed, &[STREAM_MODEL]))?;
        let test = sample_test(spec, seed, spec.test_size);
        let test_preds = test.xs.iter().map(|&x| model.predict(x)).collect();
        Ok(Self {
            config,
            exact: &shared.exact,
            iid: &shared.iid,
            seed,
            model,
            test,
            test_preds,
        })
    }

    pub fn model(&self) -> &RegressionPredictor {
        &self.model
    }

    fn records(&self, cal: &Dataset, ratio: &RatioModel) -> Result<Vec<CalibrationRecord>, HarnessError> {
        cal.xs
            .iter()
            .zip(&cal.ys)
            .map(|(&x, &y)| {
                let score = abs_residual_score(self.model.predict(x), y);
                Ok(CalibrationRecord::bare(score, ratio.ratio_at(&[x])?))
            })
            .collect()
    }

    /// Half-widths for every test point under `arm`.
    pub fn thresholds(&self, arm: Arm) -> Result<Vec<Extended>, HarnessError> {
        let alpha = self.config.alpha;
        let spec = &self.config.spec;
        let cal = sample_calibration(spec, self.seed, arm.source);
        let exact = &self.exact[&arm.source];
        let n_test = self.test.len();
        let per_query = |records: &[CalibrationRecord], ratio: &RatioModel| -> Result<Vec<Extended>, HarnessError> {
            let wc = WeightedCalibration::new(records)?;
            self.test
                .xs
                .iter()
                .map(|&x| Ok(wc.threshold(ratio.ratio_at(&[x])?, alpha)?))
                .collect()
        };
        match arm.method {
            Method::Classic => {
                let records = self.records(&cal, exact)?;
                Ok(vec![scp_threshold(&records, alpha)?; n_test])
            }
            Method::WeightedExact => per_query(&self.records(&cal, exact)?, exact),
            Method::WeightedGmm => {
                let gmm = gmm_ratio(spec, arm.source, self.seed)?;
                per_query(&self.records(&cal, &gmm)?, &gmm)
            }
            Method::TibshiraniIid => {
                let records = self.records(&cal, self.iid)?;
                let weights: Vec<f64> = records.iter().map(|r| r.ratio).collect();
                self.test
                    .xs
                    .iter()
                    .map(|&x| Ok(tibshirani_iid_threshold(&records, &weights, self.iid.ratio_at(&[x])?, alpha)?))
                    .collect()
            }
            Method::ApproxGlobal => {
                let records = self.records(&cal, exact)?;
                Ok(vec![approx_global_threshold(&records, alpha)?; n_test])
            }
            Method::Federated => {
                let gmm = gmm_ratio(spec, arm.source, self.seed)?;
                let records = self.records(&cal, &gmm)?;
                let mut agents = Vec::new();
                for origin in [0u8, 1u8] {
                    let mine: Vec<CalibrationRecord> = records
                        .iter()
                        .zip(&cal.origin)
                        .filter(|(_, &o)| o == origin)
                        .map(|(r, _)| r.clone())
                        .collect();
                    if !mine.is_empty() {
                        agents.push(AgentState::new(agents.len(), mine)?);
                    }
                }
                let fed = &self.config.fed;
                let mut fc = FederationConfig::new(
                    alpha,
                    fed.gamma,
                    fed.rounds,
                    fed.local_steps,
                    derive_seed(self.seed, &[STREAM_FED]),
                );
                if let Some(lr) = fed.learning_rate {
                    fc.learning_rate = lr;
                }
                fc.dp_sigma = fed.dp_sigma;
                fc.participation = fed.participation;
                let q = run_federation(&agents, &fc)?.q_final.max(0.0);
                Ok(vec![Extended::Finite(q); n_test])
            }
        }
    }

    pub fn evaluate(&self, arm: Arm, replication_id: usize) -> Result<ReplicationResult, HarnessError> {
        let thresholds = self.thresholds(arm)?;
        Ok(summarize(replication_id, arm, &self.test_preds, &self.test.ys, &thresholds))
    }
}

fn summarize(
    replication_id: usize,
    arm: Arm,
    preds: &[f64],
    ys: &[f64],
    thresholds: &[Extended],
) -> ReplicationResult {
    let n = ys.len() as f64;
    let mut covered = 0usize;
    let mut infinite = 0usize;
    let mut width = 0.0;
    for ((p, y), t) in preds.iter().zip(ys).zip(thresholds) {
        match t {
            Extended::Infinity => {
                covered += 1;
                infinite += 1;
            }
            Extended::Finite(t) => {
                if (y - p).abs() <= *t {
                    covered += 1;
                }
                width += 2.0 * t;
            }
        }
    }
    let coverage = covered as f64 / n;
    ReplicationResult {
        replication_id,
        method: arm.method,
        source: arm.source,
        coverage,
        mean_width: if infinite > 0 { f64::INFINITY } else { width / n },
        infinite_fraction: infinite as f64 / n,
        miscoverage: (ys.len() - covered) as f64 / n,
    }
}

/// One replication of a single arm.
pub fn run_replication(
    spec: &SyntheticSpec,
    arm: Arm,
    alpha: f64,
    seed: u64,
) -> Result<ReplicationResult, HarnessError> {
    let mut config = ExperimentConfig::new(vec![arm], 1, seed);
    config.spec = spec.clone();
    config.alpha = alpha;
    let shared = SharedModels::new(spec)?;
    ReplicationContext::new(&config, &shared, seed)?.evaluate(arm, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub method: Method,
    pub source: CalibrationSource,
    pub replications: usize,
    pub mean_coverage: f64,
    pub std_coverage: f64,
    pub mean_miscoverage: f64,
    /// Mean over replications whose intervals were all finite; `None` if
    /// there are none.
    pub mean_finite_width: Option<f64>,
    /// Share of test intervals, over all replications, with infinite width.
    pub infinite_width_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub summaries: Vec<ArmSummary>,
    pub rows: Vec<ReplicationResult>,
}

/// Order-independent mean: sums the sorted values.
fn sorted_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mut v = values.to_vec();
    let mean = sorted_mean(&mut v);
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    (sq.iter().sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl ExperimentReport {
    pub fn from_rows(config: ExperimentConfig, rows: Vec<ReplicationResult>) -> Self {
        let summaries = config
            .arms
            .iter()
            .map(|&arm| {
                let mine: Vec<&ReplicationResult> = rows
                    .iter()
                    .filter(|r| r.method == arm.method && r.source == arm.source)
                    .collect();
                let mut cov: Vec<f64> = mine.iter().map(|r| r.coverage).collect();
                let mut mis: Vec<f64> = mine.iter().map(|r| r.miscoverage).collect();
                let mut widths: Vec<f64> = mine.iter().map(|r| r.mean_width).filter(|w| w.is_finite()).collect();
                let mut inf: Vec<f64> = mine.iter().map(|r| r.infinite_fraction).collect();
                let std_coverage = sample_std(&cov);
                ArmSummary {
                    method: arm.method,
                    source: arm.source,
                    replications: mine.len(),
                    mean_coverage: sorted_mean(&mut cov),
                    std_coverage,
                    mean_miscoverage: sorted_mean(&mut mis),
                    mean_finite_width: (!widths.is_empty()).then(|| sorted_mean(&mut widths)),
                    infinite_width_fraction: sorted_mean(&mut inf),
                }
            })
            .collect();
        Self { config, summaries, rows }
    }

    pub fn summary(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == arm.method && s.source == arm.source)
    }

    pub fn rows_for(&self, arm: Arm) -> impl Iterator<Item = &ReplicationResult> {
        self.rows
            .iter()
            .filter(move |r| r.method == arm.method && r.source == arm.source)
    }

    /// `replication_id,method,source,coverage,mean_width,miscoverage`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replication_id", "method", "source", "coverage", "mean_width", "miscoverage"])?;
        for r in &self.rows {
            w.write_record([
                r.replication_id.to_string(),
                r.method.to_string(),
                r.source.to_string(),
                sig6(r.coverage),
                sig6(r.mean_width),
                sig6(r.miscoverage),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Runs every arm on `config.replications` independently seeded
/// replications. Rows come back in replication order whatever the worker
/// count.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    config.spec.validate()?;
    if config.replications == 0 {
        return Err(HarnessError::InvalidSpec("need at least one replication".into()));
    }
    if config.arms.is_empty() {
        return Err(HarnessError::InvalidSpec("no arms to evaluate".into()));
    }
    let shared = SharedModels::new(&config.spec)?;
    let one = |index: usize| -> Result<Vec<ReplicationResult>, HarnessError> {
        let ctx = ReplicationContext::new(config, &shared, replication_seed(config.base_seed, index))?;
        config.arms.iter().map(|&arm| ctx.evaluate(arm, index)).collect()
    };
    let run_all = || -> Result<Vec<Vec<ReplicationResult>>, HarnessError> {
        (0..config.replications).into_par_iter().map(one).collect()
    };
    let nested = if config.parallelism == 0 {
        run_all()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?
            .install(run_all)?
    };
    Ok(ExperimentReport::from_rows(config.clone(), nested.into_iter().flatten().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("weighted".parse::<Method>().unwrap(), Method::WeightedExact);
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn summarize_counts() {
        let arm = Arm::new(CalibrationSource::Mix, Method::Classic);
        let r = summarize(
            0,
            arm,
            &[0.0, 0.0, 0.0, 0.0],
            &[0.5, 2.0, -0.9, 5.0],
            &[Extended::Finite(1.0), Extended::Finite(1.0), Extended::Finite(1.0), Extended::Infinity],
        );
        assert_eq!(r.coverage, 0.75);
        assert_eq!(r.miscoverage, 0.25);
        assert_eq!(r.infinite_fraction, 0.25);
        assert!(r.mean_width.is_infinite());
    }

    #[test]
    fn std_matches_hand_value() {
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(sample_std(&[2.0]), 0.0);
    }

    #[test]
    fn replication_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| replication_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(replication_seed(7, 0), 7);
    }
}
