use fedcp_core::conformal::{approx_global_threshold, CalibrationRecord};
use fedcp_core::scoring::Score;
use fedcp_fedsim::{
    moreau_pinball_grad, run_federation, run_federation_with_bus, AgentState, Endpoint, FederationConfig,
    MessageBus, Participation,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

const ALPHA: f64 = 0.1;

fn make_agents(n_agents: usize, per_agent: usize, seed: u64) -> Vec<AgentState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratio = LogNormal::new(0.0, 0.5).unwrap();
    (0..n_agents)
        .map(|i| {
            let shift = Normal::new(0.5 + 0.2 * i as f64, 1.0).unwrap();
            let records = (0..per_agent)
                .map(|_| {
                    let s: f64 = shift.sample(&mut rng);
                    CalibrationRecord::bare(Score::new(s.abs()).unwrap(), ratio.sample(&mut rng))
                })
                .collect();
            AgentState::new(i, records).unwrap()
        })
        .collect()
}

fn pooled(agents: &[AgentState]) -> Vec<CalibrationRecord> {
    agents.iter().flat_map(|a| a.records().iter().cloned()).collect()
}

fn score_range(records: &[CalibrationRecord]) -> f64 {
    let (lo, hi) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.score.value()), hi.max(r.score.value()))
    });
    hi - lo
}

fn global_threshold(records: &[CalibrationRecord]) -> f64 {
    approx_global_threshold(records, ALPHA).unwrap().finite().unwrap()
}

/// Minimizer of the pooled smoothed objective by bisection on its monotone
/// gradient.
fn smoothed_minimizer(records: &[CalibrationRecord], gamma: f64) -> f64 {
    let grad = |q: f64| -> f64 {
        records
            .iter()
            .map(|r| r.ratio * moreau_pinball_grad(q, r.score.value(), ALPHA, gamma))
            .sum()
    };
    let (mut lo, mut hi) = (-100.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if grad(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest spacing among the atoms bracketing `q` and their neighbours.
fn local_gap(records: &[CalibrationRecord], q: f64) -> f64 {
    let mut v: Vec<f64> = records.iter().map(|r| r.score.value()).collect();
    v.sort_by(f64::total_cmp);
    let i = v.partition_point(|&x| x < q).clamp(1, v.len() - 1);
    let lo = i.saturating_sub(2).max(1);
    let hi = (i + 2).min(v.len() - 1);
    (lo..=hi).map(|j| v[j] - v[j - 1]).fold(0.0, f64::max)
}

#[test]
fn full_participation_recovers_global_threshold() {
    let agents = make_agents(10, 50, 2024);
    let records = pooled(&agents);
    let target = global_threshold(&records);
    let range = score_range(&records);

    let config = FederationConfig::new(ALPHA, 0.01, 10_000, 10, 7);
    let out = run_federation(&agents, &config).unwrap();
    let err = (out.q_final - target).abs();
    println!("q_bar_T = {}, oracle = {target}, |err| / range = {}", out.q_final, err / range);
    assert!(err <= 0.05 * range);

    let again = run_federation(&agents, &config).unwrap();
    assert_eq!(out.q_final.to_bits(), again.q_final.to_bits());
    assert_eq!(out, again);
}

#[test]
fn partial_participation_with_noise_stays_close() {
    let agents = make_agents(10, 50, 2024);
    let records = pooled(&agents);
    let target = global_threshold(&records);
    let range = score_range(&records);

    let mut total = 0.0;
    for seed in 0..20 {
        let mut config = FederationConfig::new(ALPHA, 0.01, 10_000, 10, seed);
        config.participation = Participation::Fraction(0.5);
        config.dp_sigma = 0.01;
        let out = run_federation(&agents, &config).unwrap();
        total += (out.q_final - target).abs();
    }
    let mean_err = total / 20.0;
    println!("mean |err| / range = {}", mean_err / range);
    assert!(mean_err <= 0.15 * range);
}

#[test]
fn smoothed_minimizer_approaches_global_threshold() {
    let agents = make_agents(10, 50, 99);
    let records = pooled(&agents);
    let target = global_threshold(&records);

    let mut previous = f64::INFINITY;
    for gamma in [1.0, 0.1, 0.01] {
        let q_star = smoothed_minimizer(&records, gamma);
        let gap_to_target = (q_star - target).abs();
        assert!(gap_to_target <= gamma, "gamma {gamma}: {gap_to_target}");
        assert!(gap_to_target <= previous + 1e-12, "not monotone at gamma {gamma}");
        previous = gap_to_target;

        let steps = 100_000usize;
        let local_steps = 10;
        let config = FederationConfig::new(ALPHA, gamma, steps / local_steps, local_steps, 3);
        let out = run_federation(&agents, &config).unwrap();
        let tol = local_gap(&records, q_star).max(gamma);
        assert!(
            (out.q_final - q_star).abs() <= tol,
            "gamma {gamma}: q_bar {} vs minimizer {q_star}, tolerance {tol}",
            out.q_final
        );
    }
}

#[test]
fn message_log_counts_uploads_and_downloads() {
    let agents = make_agents(8, 5, 1);
    let mut config = FederationConfig::new(ALPHA, 0.1, 6, 2, 4);
    config.participation = Participation::Count(3);
    let mut bus = MessageBus::new();
    let out = run_federation_with_bus(&agents, &config, &mut bus).unwrap();
    assert_eq!(bus.pending(), 0);
    for (t, record) in out.trace.iter().enumerate() {
        assert_eq!(record.messages, 6);
        assert_eq!(bus.sent_in_round(t), 6);
        for &i in &record.sampled_agents {
            assert_eq!(bus.sent_between(t, Endpoint::Server, Endpoint::Agent(i)), 1);
            assert_eq!(bus.sent_between(t, Endpoint::Agent(i), Endpoint::Server), 1);
        }
    }
}

#[test]
fn result_independent_of_thread_count() {
    let agents = make_agents(10, 20, 5);
    let mut config = FederationConfig::new(ALPHA, 0.05, 50, 3, 21);
    config.dp_sigma = 0.2;
    config.participation = Participation::Fraction(0.6);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let multi = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = single.install(|| run_federation(&agents, &config).unwrap());
    let b = multi.install(|| run_federation(&agents, &config).unwrap());
    assert_eq!(a, b);
}
