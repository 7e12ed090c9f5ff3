use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use fedcp_core::conformal::{approx_global_threshold, scp_threshold, CalibrationRecord, WeightedCalibration};
use fedcp_core::ratio::{fit_gmm_params, RatioModel};
use fedcp_core::scoring::{abs_residual_score, Score};
use fedcp_core::seed::derive_seed;
use fedcp_fedsim::{run_federation, write_trace_jsonl, AgentState, FederationConfig, Participation};
use fedcp_harness::checks::fixed_predictor;
use fedcp_harness::format::sig6;
use fedcp_harness::synthetic::{Component, Dataset};
use fedcp_harness::{
    beta_law_check, bound_check, run_experiment, Arm, BetaMode, BoundCheckConfig, CalibrationSource,
    ExperimentConfig, HarnessError, Method, SyntheticSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Parser)]
#[command(name = "fedcp", about = "Weighted and federated conformal prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Coverage on the synthetic covariate-shift benchmark.
    SynthTable1(SynthArgs),
    /// Conditional miscoverage of split conformal against its Beta law.
    BetaCheck(BetaArgs),
    /// Violations of the high-probability miscoverage sandwich.
    BoundCheck(BoundArgs),
    /// Federated smoothed-quantile estimation on simulated agents.
    FedQuantile(FedArgs),
    /// Thresholds from a score file.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    /// Comma-separated calibration sources.
    #[arg(long, default_value = "mix", value_delimiter = ',')]
    cal_source: Vec<CalibrationSource>,
    /// Comma-separated methods.
    #[arg(long, default_value = "classic,weighted-exact", value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-replication CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Covariate variance of both components.
    #[arg(long)]
    variance: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Regressor training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Regressor learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct BetaArgs {
    #[arg(long, default_value_t = 99)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 2000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test pool size; 0 evaluates the miscoverage in closed form.
    #[arg(long, default_value_t = 2000)]
    pool: usize,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 2000)]
    reps: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value = "mix")]
    source: CalibrationSource,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FedArgs {
    #[arg(long, default_value_t = 40)]
    agents: usize,
    #[arg(long, default_value_t = 50)]
    records: usize,
    #[arg(long, default_value_t = 1000)]
    rounds: usize,
    #[arg(long, default_value_t = 0.01)]
    gamma: f64,
    /// Learning rate; defaults to gamma / 2.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    dp_sigma: f64,
    #[arg(long, default_value_t = 10)]
    local_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    participation: f64,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines trace path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// CSV with header `id,score,ratio`.
    #[arg(long)]
    scores: PathBuf,
    /// Optional CSV with header `id,ratio` holding test-point ratios.
    #[arg(long)]
    ratios: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthTable1(a) => synth_table1(a),
        Command::BetaCheck(a) => beta_check(a),
        Command::BoundCheck(a) => bound_cmd(a),
        Command::FedQuantile(a) => fed_quantile(a),
        Command::Calibrate(a) => calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn create(path: &PathBuf) -> Result<BufWriter<File>, HarnessError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn synth_table1(a: SynthArgs) -> Result<(), HarnessError> {
    let arms = a
        .cal_source
        .iter()
        .flat_map(|&s| a.methods.iter().map(move |&m| Arm::new(s, m)))
        .collect();
    let mut config = ExperimentConfig::new(arms, a.reps, a.seed);
    config.alpha = a.alpha;
    config.parallelism = a.threads;
    if let Some(v) = a.variance {
        config.spec.p1.variance = v;
        config.spec.p2.variance = v;
    }
    if let Some(s) = a.noise_std {
        config.spec.noise_std = s;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        config.train.learning_rate = lr;
    }
    let report = run_experiment(&config)?;
    let mut out = io::stdout().lock();
    writeln!(out, "method,source,replications,mean_coverage,std_coverage,mean_finite_width,infinite_width_fraction")?;
    for s in &report.summaries {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.method,
            s.source,
            s.replications,
            sig6(s.mean_coverage),
            sig6(s.std_coverage),
            s.mean_finite_width.map_or_else(|| "na".to_string(), sig6),
            sig6(s.infinite_width_fraction)
        )?;
    }
    if let Some(path) = &a.out {
        report.write_json(create(path)?)?;
    }
    if let Some(path) = &a.csv {
        report.write_csv(create(path)?)?;
    }
    Ok(())
}

fn beta_check(a: BetaArgs) -> Result<(), HarnessError> {
    let mode = if a.pool == 0 {
        BetaMode::Exact
    } else {
        BetaMode::Pool { pool_size: a.pool }
    };
    let r = beta_law_check(&SyntheticSpec::default(), a.n, a.alpha, a.reps, a.seed, mode)?;
    println!("reference: Beta({}, {})", sig6(r.reference_a), sig6(r.reference_b));
    println!("empirical_mean {}  reference_mean {}", sig6(r.empirical_mean), sig6(r.reference_mean));
    println!("empirical_std {}  reference_std {}", sig6(r.empirical_std), sig6(r.reference_std));
    println!("ks_distance {}", sig6(r.ks_distance));
    Ok(())
}

fn bound_cmd(a: BoundArgs) -> Result<(), HarnessError> {
    let mut config = BoundCheckConfig::new(a.source, a.n, a.delta, a.reps, a.seed);
    config.alpha = a.alpha;
    let r = bound_check(&config)?;
    println!("tau {}", sig6(r.bound.tau));
    println!("sandwich ({}, {})", sig6(r.bound.lower), sig6(r.bound.upper));
    println!("bias_bound {}", sig6(r.bound.bias_bound));
    println!("mean_miscoverage {}", sig6(r.mean_miscoverage));
    println!(
        "violations lower {} upper {} tolerance {}",
        sig6(r.lower_fraction()),
        sig6(r.upper_fraction()),
        sig6(r.tolerance)
    );
    println!("{}", if r.passed { "PASS" } else { "FAIL" });
    Ok(())
}

/// Agents whose covariate means run linearly from `P1`'s to `P2`'s; the last
/// agent holds the target law.
fn fed_quantile(a: FedArgs) -> Result<(), HarnessError> {
    if a.agents < 2 || a.records == 0 {
        return Err(HarnessError::InvalidSpec("need at least two agents with records".into()));
    }
    let spec = SyntheticSpec::default();
    let model = fixed_predictor(&spec, a.seed)?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
    let mut data = Vec::with_capacity(a.agents);
    let mut params = Vec::with_capacity(a.agents);
    for i in 0..a.agents {
        let t = i as f64 / (a.agents - 1) as f64;
        let c = Component {
            mean: spec.p1.mean + t * (spec.p2.mean - spec.p1.mean),
            variance: spec.p1.variance,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, &[41, i as u64]));
        let xd = Normal::new(c.mean, c.variance.sqrt()).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        let mut d = Dataset::default();
        for _ in 0..a.records {
            let x = xd.sample(&mut rng);
            d.xs.push(x);
            d.ys.push(fedcp_harness::synthetic::true_curve(x) + noise.sample(&mut rng));
            d.origin.push(0);
        }
        let features: Vec<Vec<f64>> = d.xs.iter().map(|&x| vec![x]).collect();
        params.push(fit_gmm_params(i, &features, &vec![0; features.len()])?);
        data.push(d);
    }
    let ratio = RatioModel::from_gmm(params.last().expect("agents"), &params)?;
    let mut agents = Vec::with_capacity(a.agents);
    for (i, d) in data.iter().enumerate() {
        let records = d
            .xs
            .iter()
            .zip(&d.ys)
            .map(|(&x, &y)| Ok(CalibrationRecord::bare(abs_residual_score(model.predict(x), y), ratio.ratio_at(&[x])?)))
            .collect::<Result<Vec<_>, HarnessError>>()?;
        agents.push(AgentState::new(i, records)?);
    }
    let mut config = FederationConfig::new(a.alpha, a.gamma, a.rounds, a.local_steps, a.seed);
    if let Some(eta) = a.eta {
        config.learning_rate = eta;
    }
    config.dp_sigma = a.dp_sigma;
    config.participation = Participation::Fraction(a.participation);
    let outcome = run_federation(&agents, &config)?;
    let pooled: Vec<CalibrationRecord> = agents.iter().flat_map(|ag| ag.records().iter().cloned()).collect();
    let central = approx_global_threshold(&pooled, a.alpha)?;
    println!("q_bar_T {}", sig6(outcome.q_final));
    println!("centralized_threshold {}", sig6(central.to_f64()));
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        write_trace_jsonl(&outcome.trace, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct ScoreRow {
    id: String,
    score: f64,
    ratio: f64,
}

#[derive(Deserialize)]
struct RatioRow {
    id: String,
    ratio: f64,
}

fn calibrate(a: CalibrateArgs) -> Result<(), HarnessError> {
    let mut reader = csv::Reader::from_path(&a.scores)?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        let row: ScoreRow = row?;
        let score = Score::new(row.score)
            .ok_or_else(|| HarnessError::Parse(format!("row {}: invalid score {}", row.id, row.score)))?;
        records.push(CalibrationRecord::bare(score, row.ratio));
    }
    println!("scp_threshold {}", sig6(scp_threshold(&records, a.alpha)?.to_f64()));
    println!("approx_global_threshold {}", sig6(approx_global_threshold(&records, a.alpha)?.to_f64()));
    if let Some(path) = &a.ratios {
        let wc = WeightedCalibration::new(&records)?;
        let mut reader = csv::Reader::from_path(path)?;
        println!("id,weighted_threshold");
        for row in reader.deserialize() {
            let row: RatioRow = row?;
            println!("{},{}", row.id, sig6(wc.threshold(row.ratio, a.alpha)?.to_f64()));
        }
    }
    Ok(())
}
