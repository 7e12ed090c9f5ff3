//! Round-based simulation of federated quantile estimation.
//!
//! Each agent holds calibration records with scores `V_k` and density ratios
//! `lambda_k`. The server looks for the minimizer of the ratio-weighted,
//! Moreau-smoothed pinball loss by FedAvg-style rounds: a random subset of
//! agents runs `K` noisy local gradient steps from the broadcast iterate, and
//! the server folds their updates back with weights `Lambda_i / sum_j
//! Lambda_j`, rescaled by `n / |S|`. The output is the running average of the
//! iterates.
//!
//! Gaussian noise is added to every local gradient without clipping, so the
//! simulation does not by itself carry a differential-privacy guarantee.

pub mod bus;
pub mod moreau;

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use fedcp_core::conformal::CalibrationRecord;
use fedcp_core::seed::derive_seed;

pub use bus::{Endpoint, Envelope, EventKind, Message, MessageBus, TransportEvent};
pub use moreau::{moreau_pinball_grad, moreau_pinball_loss, pinball_loss};

/// Iterates beyond this magnitude abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

const STREAM_SAMPLING: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("agent {0} has zero total ratio mass")]
    ZeroMass(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("iterate diverged in round {round}: q = {q}")]
    Diverged { round: usize, q: f64 },
    #[error("no agents")]
    NoAgents,
    #[error("invalid record in agent {0}: {1}")]
    InvalidRecord(usize, String),
}

/// One participant: its records and their ratio total `Lambda_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub agent_id: usize,
    records: Vec<CalibrationRecord>,
    lambda_total: f64,
}

impl AgentState {
    pub fn new(agent_id: usize, records: Vec<CalibrationRecord>) -> Result<Self, FedError> {
        for r in &records {
            if !r.ratio.is_finite() || r.ratio < 0.0 {
                return Err(FedError::InvalidRecord(agent_id, format!("ratio {}", r.ratio)));
            }
        }
        let lambda_total = records.iter().map(|r| r.ratio).sum();
        Ok(Self {
            agent_id,
            records,
            lambda_total,
        })
    }

    pub fn records(&self) -> &[CalibrationRecord] {
        &self.records
    }

    /// `Lambda_i = sum_k lambda_k^i`, the only statistic an agent uploads
    /// before the rounds begin.
    pub fn lambda_total(&self) -> f64 {
        self.lambda_total
    }
}

/// `(1/Lambda_i) sum_k lambda_k grad S_{alpha, V_k}^{gamma}(q)`.
pub fn local_loss_grad(agent: &AgentState, q: f64, alpha: f64, gamma: f64) -> Result<f64, FedError> {
    if agent.lambda_total <= 0.0 {
        return Err(FedError::ZeroMass(agent.agent_id));
    }
    let weighted: f64 = agent
        .records
        .iter()
        .map(|r| r.ratio * moreau_pinball_grad(q, r.score.value(), alpha, gamma))
        .sum();
    Ok(weighted / agent.lambda_total)
}

/// `Lambda_i / sum_j Lambda_j` for every agent.
pub fn aggregation_weights(agents: &[AgentState]) -> Result<Vec<f64>, FedError> {
    let total: f64 = agents.iter().map(|a| a.lambda_total).sum();
    if !(total > 0.0) {
        return Err(FedError::InvalidConfig("agents carry no ratio mass".into()));
    }
    Ok(agents.iter().map(|a| a.lambda_total / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Participation {
    /// Share of agents sampled each round, in `(0, 1]`; rounded, at least one.
    Fraction(f64),
    /// Exact number of agents sampled each round.
    Count(usize),
}

impl Participation {
    pub fn subset_size(&self, n: usize) -> Result<usize, FedError> {
        match *self {
            Participation::Fraction(f) if f > 0.0 && f <= 1.0 => {
                Ok(((f * n as f64).round() as usize).clamp(1, n))
            }
            Participation::Count(m) if m >= 1 && m <= n => Ok(m),
            other => Err(FedError::InvalidConfig(format!(
                "participation {other:?} invalid for {n} agents"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub alpha: f64,
    pub rounds: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub dp_sigma: f64,
    pub local_steps: usize,
    pub participation: Participation,
    pub seed: u64,
    /// Starting iterate `q_0`.
    pub initial_q: f64,
}

impl FederationConfig {
    /// Full participation, no noise, `eta = gamma / 2`.
    pub fn new(alpha: f64, gamma: f64, rounds: usize, local_steps: usize, seed: u64) -> Self {
        Self {
            alpha,
            rounds,
            learning_rate: gamma / 2.0,
            gamma,
            dp_sigma: 0.0,
            local_steps,
            participation: Participation::Fraction(1.0),
            seed,
            initial_q: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {}", self.alpha));
        }
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if self.local_steps < 1 {
            return bad("local steps must be at least 1".into());
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma {}", self.gamma));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(self.dp_sigma >= 0.0) || !self.dp_sigma.is_finite() {
            return bad(format!("dp sigma {}", self.dp_sigma));
        }
        if !self.initial_q.is_finite() {
            return bad("initial iterate must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub q: f64,
    pub q_bar: f64,
}

impl ServerState {
    pub fn initial(config: &FederationConfig) -> Self {
        Self {
            round: 0,
            q: config.initial_q,
            q_bar: config.initial_q,
        }
    }
}

/// One line of the exported trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub sampled_agents: Vec<usize>,
    pub q_t: f64,
    pub q_bar_t: f64,
    pub messages: usize,
}

/// Uniform sample without replacement of agent indices for round `round`,
/// sorted ascending.
pub fn sample_agents(
    n: usize,
    participation: Participation,
    seed: u64,
    round: usize,
) -> Result<Vec<usize>, FedError> {
    let m = participation.subset_size(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SAMPLING, round as u64]));
    let mut picked = index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// `K` noisy gradient steps from `q_start`. Returns the change in the
/// iterate and the mean of the post-step iterates `q_{t,1..K}`.
fn local_update(
    agent: &AgentState,
    q_start: f64,
    config: &FederationConfig,
    round: usize,
) -> Result<(f64, f64), FedError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        &[STREAM_NOISE, round as u64, agent.agent_id as u64],
    ));
    let noise = (config.dp_sigma > 0.0).then(|| Normal::new(0.0, config.dp_sigma).expect("sigma validated"));
    let mut q = q_start;
    let mut sum = 0.0;
    for _ in 0..config.local_steps {
        let mut g = local_loss_grad(agent, q, config.alpha, config.gamma)?;
        if let Some(n) = &noise {
            g += n.sample(&mut rng);
        }
        q -= config.learning_rate * g;
        sum += q;
    }
    Ok((q - q_start, sum / config.local_steps as f64))
}

/// Advances the server by one round, exchanging messages over `bus`.
///
/// The result depends only on `(config.seed, server.round, agent_id)`; local
/// updates run in parallel.
pub fn run_round(
    server: &ServerState,
    agents: &[AgentState],
    config: &FederationConfig,
    bus: &mut MessageBus,
) -> Result<(ServerState, RoundRecord), FedError> {
    if agents.is_empty() {
        return Err(FedError::NoAgents);
    }
    let t = server.round;
    let n = agents.len();
    let weights = aggregation_weights(agents)?;
    let sampled = sample_agents(n, config.participation, config.seed, t)?;

    for &i in &sampled {
        bus.enqueue(Envelope {
            round: t,
            from: Endpoint::Server,
            to: Endpoint::Agent(agents[i].agent_id),
            message: Message::Broadcast { q: server.q },
        });
    }

    let inbox: Vec<(usize, f64)> = sampled
        .iter()
        .map(|&i| {
            let delivered = bus.deliver(Endpoint::Agent(agents[i].agent_id));
            let q = delivered
                .iter()
                .rev()
                .find_map(|e| match e.message {
                    Message::Broadcast { q } => Some(q),
                    _ => None,
                })
                .expect("broadcast was just enqueued");
            (i, q)
        })
        .collect();

    let updates: Vec<(usize, f64, f64)> = inbox
        .par_iter()
        .map(|&(i, q_start)| local_update(&agents[i], q_start, config, t).map(|(dq, dqb)| (i, dq, dqb)))
        .collect::<Result<_, _>>()?;

    for &(i, delta_q, delta_q_bar) in &updates {
        bus.enqueue(Envelope {
            round: t,
            from: Endpoint::Agent(agents[i].agent_id),
            to: Endpoint::Server,
            message: Message::Update { delta_q, delta_q_bar },
        });
    }

    let scale = n as f64 / sampled.len() as f64;
    let mut step = 0.0;
    let mut mean_step = 0.0;
    let received = bus.deliver(Endpoint::Server);
    for (envelope, &(i, _, _)) in received.iter().zip(&updates) {
        if let Message::Update { delta_q, delta_q_bar } = envelope.message {
            step += weights[i] * delta_q;
            mean_step += weights[i] * delta_q_bar;
        }
    }

    let tf = t as f64;
    let q = server.q + scale * step;
    let q_bar = tf / (tf + 1.0) * server.q_bar + scale * mean_step / (tf + 1.0);
    if !q.is_finite() || q.abs() > DIVERGENCE_LIMIT || !q_bar.is_finite() {
        return Err(FedError::Diverged { round: t, q });
    }

    let next = ServerState {
        round: t + 1,
        q,
        q_bar,
    };
    let record = RoundRecord {
        t: t + 1,
        sampled_agents: sampled.iter().map(|&i| agents[i].agent_id).collect(),
        q_t: q,
        q_bar_t: q_bar,
        messages: bus.sent_in_round(t),
    };
    Ok((next, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationOutcome {
    /// `q_bar_T`, the smoothed-quantile estimate.
    pub q_final: f64,
    pub states: Vec<ServerState>,
    pub trace: Vec<RoundRecord>,
}

/// Runs `config.rounds` rounds and returns `q_bar_T` with the full trace.
pub fn run_federation(agents: &[AgentState], config: &FederationConfig) -> Result<FederationOutcome, FedError> {
    let mut bus = MessageBus::new();
    run_federation_with_bus(agents, config, &mut bus)
}

pub fn run_federation_with_bus(
    agents: &[AgentState],
    config: &FederationConfig,
    bus: &mut MessageBus,
) -> Result<FederationOutcome, FedError> {
    config.validate()?;
    if agents.is_empty() {
        return Err(FedError::NoAgents);
    }
    let mut state = ServerState::initial(config);
    let mut states = Vec::with_capacity(config.rounds);
    let mut trace = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let (next, record) = run_round(&state, agents, config, bus)?;
        state = next;
        states.push(state);
        trace.push(record);
    }
    Ok(FederationOutcome {
        q_final: state.q_bar,
        states,
        trace,
    })
}

/// Writes one JSON object per round.
pub fn write_trace_jsonl<W: Write>(trace: &[RoundRecord], mut out: W) -> std::io::Result<()> {
    for record in trace {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
