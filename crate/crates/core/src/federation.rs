//! Cohort-wise federated training: local client updates, per-cohort clipped
//! and noised aggregation under a privacy ledger, and server averaging.

use crate::continual::{self, RehearsalSchedule, SIState};
use crate::data::{ClientShard, Dataset};
use crate::metrics::{self, MetricsError};
use crate::nn::{self, Batch, NnError, Optimizer, OptimizerConfig, ParamVector, NUM_CLASSES};
use crate::privacy::{self, CohortLedger, NoiseSpec, PrivacyError};
use crate::rng::{self, Stream};
use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("client {client} has no rows")]
    EmptyShard { client: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("SI state error: {0}")]
    Si(String),
}

pub type Result<T> = std::result::Result<T, FederationError>;

/// Local training settings shared by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 10,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Whether cohort aggregates are clipped and noised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    Private(NoiseSpec),
    NonPrivate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub delta: ParamVector,
    pub norm: f64,
}

/// Runs `epochs` passes of shuffled mini-batch optimization from `global`
/// over the shard and returns the change in parameters.
pub fn dp_client_update(
    global: &ParamVector,
    shard: &ClientShard,
    config: &ClientConfig,
    seed: u64,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(FederationError::EmptyShard {
            client: shard.client_id,
        });
    }
    if config.batch_size == 0 {
        return Err(FederationError::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut params = global.clone();
    let mut optimizer = Optimizer::new(&config.optimizer, params.len());
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut rng = rng::stream(seed, Stream::LocalShuffle, &[]);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch {
                features: shard.data.features.select_rows(chunk),
                labels: chunk.iter().map(|&i| shard.data.labels[i]).collect(),
            };
            let (grad, _) = nn::backward(&params, &batch)?;
            optimizer.step(&mut params, &grad)?;
        }
    }
    let delta = params.difference(global)?;
    let norm = delta.l2_norm();
    Ok(ClientUpdate { delta, norm })
}

/// One cohort: its clients, privacy ledger and query instrumentation.
#[derive(Debug, Clone)]
pub struct CohortRuntime {
    pub cohort_id: usize,
    pub shards: Vec<ClientShard>,
    /// `None` when training without privacy.
    pub ledger: Option<CohortLedger>,
    pub m: usize,
    pub epsilon: f64,
    /// Number of local updates requested from clients so far.
    pub client_queries: u64,
    /// Rounds in which the cohort contributed a delta.
    pub participations: u64,
}

impl CohortRuntime {
    pub fn new(cohort_id: usize, shards: Vec<ClientShard>, ledger: Option<CohortLedger>, m: usize, epsilon: f64) -> Result<Self> {
        if m == 0 || m > shards.len() {
            return Err(FederationError::InvalidConfig(format!(
                "cohort {cohort_id}: cannot sample {m} of {} clients",
                shards.len()
            )));
        }
        if let Some(l) = &ledger {
            let q = m as f64 / shards.len() as f64;
            if (l.q - q).abs() > 1e-12 {
                return Err(FederationError::InvalidConfig(format!(
                    "cohort {cohort_id}: ledger q {} differs from m/K = {q}",
                    l.q
                )));
            }
        }
        Ok(Self {
            cohort_id,
            shards,
            ledger,
            m,
            epsilon,
            client_queries: 0,
            participations: 0,
        })
    }

    pub fn is_exhausted(&self) -> bool {
        self.ledger.as_ref().is_some_and(|l| l.exhausted)
    }

    pub fn delta_spent(&self) -> Option<f64> {
        self.ledger.as_ref().map(CohortLedger::delta_spent)
    }

    /// Indices of the clients sampled in `round`, ascending.
    pub fn sample_clients(&self, root_seed: u64, round: u64) -> Vec<usize> {
        let mut rng = rng::stream(root_seed, Stream::ClientSampling, &[round, self.cohort_id as u64]);
        let mut picked = index::sample(&mut rng, self.shards.len(), self.m).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// A cohort's contribution to one server round.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortDelta {
    pub delta: ParamVector,
    pub participated: bool,
}

/// Runs one cohort round: sample `m` clients, clip each update to `S`, sum,
/// add `N(0, S^2 sigma^2)` per coordinate and divide by `m`. A cohort whose
/// next round would push delta past its threshold is marked exhausted and
/// returns a zero delta without querying any client.
pub fn dp_cohort_round(
    cohort: &mut CohortRuntime,
    global: &ParamVector,
    mechanism: &Mechanism,
    client: &ClientConfig,
    root_seed: u64,
    round: u64,
) -> Result<CohortDelta> {
    let zero = CohortDelta {
        delta: ParamVector::zeros(global.shapes()),
        participated: false,
    };
    if let Some(ledger) = cohort.ledger.as_mut() {
        if !ledger.admit_round() {
            return Ok(zero);
        }
    }
    let mut sum = ParamVector::zeros(global.shapes());
    for k in cohort.sample_clients(root_seed, round) {
        let seed = rng::derive_seed(root_seed, &[round, cohort.cohort_id as u64, k as u64]);
        let mut update = dp_client_update(global, &cohort.shards[k], client, seed)?;
        cohort.client_queries += 1;
        if let Mechanism::Private(spec) = mechanism {
            privacy::clip_in_place(&mut update.delta, spec.sensitivity);
        }
        sum.add_scaled_in_place(update.delta.values(), 1.0)?;
    }
    if let Mechanism::Private(spec) = mechanism {
        let mut noise_rng = rng::stream(root_seed, Stream::CohortNoise, &[round, cohort.cohort_id as u64]);
        let noise = privacy::gaussian_noise(sum.len(), spec, &mut noise_rng);
        sum.add_scaled_in_place(&noise, 1.0)?;
    }
    sum.scale_in_place(1.0 / cohort.m as f64);
    if let Some(ledger) = cohort.ledger.as_mut() {
        ledger.accumulate_round()?;
    }
    cohort.participations += 1;
    Ok(CohortDelta {
        delta: sum,
        participated: true,
    })
}

/// Test-set scores recorded on evaluation rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestScores {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

/// Per-round record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u64,
    /// Delta spent per cohort; `None` without privacy.
    pub cohort_delta: Vec<Option<f64>>,
    pub exhausted: Vec<bool>,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test: Option<TestScores>,
    pub wall_ms: Option<u64>,
}

/// Data and cadence for the per-round evaluation.
#[derive(Debug, Clone)]
pub struct EvalPlan {
    pub train_subset: Dataset,
    pub test: Dataset,
    /// Test F1 is computed after every `eval_every`-th round and at the end.
    pub eval_every: u64,
    pub record_timing: bool,
}

pub fn train_scores(params: &ParamVector, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let probs = nn::forward(params, &data.features)?;
    let loss = nn::xent_loss(&probs, &data.labels)?;
    let correct = (0..probs.rows())
        .filter(|&r| nn::argmax(probs.row(r)) == data.labels[r])
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

pub fn evaluate(params: &ParamVector, test: &Dataset) -> Result<metrics::F1Report> {
    let preds = nn::predict(params, &test.features)?;
    let cm = metrics::confusion(&preds, &test.labels, NUM_CLASSES)?;
    Ok(metrics::f1_report(&cm)?)
}

pub fn test_scores(params: &ParamVector, test: &Dataset) -> Result<TestScores> {
    let r = evaluate(params, test)?;
    Ok(TestScores {
        micro_f1: r.micro,
        macro_f1: r.macro_f1,
        weighted_f1: r.weighted,
    })
}

/// Which server-round rule drives training, with its algorithm state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "kebab-case")]
pub enum AlgorithmState {
    Nonprivate,
    Dp,
    DpR { schedule: RehearsalSchedule },
    DpSi { si: SIState },
}

impl AlgorithmState {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmState::Nonprivate => "nonprivate",
            AlgorithmState::Dp => "dp",
            AlgorithmState::DpR { .. } => "dp-r",
            AlgorithmState::DpSi { .. } => "dp-si",
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub global_params: ParamVector,
    pub cohorts: Vec<CohortRuntime>,
    pub round: u64,
    pub history: Vec<MetricsRow>,
    pub root_seed: u64,
}

impl FederationState {
    pub fn new(global_params: ParamVector, cohorts: Vec<CohortRuntime>, root_seed: u64) -> Result<Self> {
        if cohorts.is_empty() {
            return Err(FederationError::InvalidConfig("at least one cohort is required".into()));
        }
        Ok(Self {
            global_params,
            cohorts,
            round: 0,
            history: Vec::new(),
            root_seed,
        })
    }

    pub fn all_exhausted(&self) -> bool {
        self.cohorts.iter().all(CohortRuntime::is_exhausted)
    }

    pub fn client_queries(&self) -> Vec<u64> {
        self.cohorts.iter().map(|c| c.client_queries).collect()
    }

    /// Runs this round's cohort update for cohort `c`.
    pub(crate) fn cohort_delta(
        &mut self,
        c: usize,
        mechanism: &Mechanism,
        client: &ClientConfig,
    ) -> Result<CohortDelta> {
        let (round, seed) = (self.round, self.root_seed);
        dp_cohort_round(&mut self.cohorts[c], &self.global_params, mechanism, client, seed, round)
    }

    /// Applies `update` to the global model, records the round's metrics and
    /// advances the round counter.
    pub(crate) fn finish_round(&mut self, update: Option<&ParamVector>, eval: &EvalPlan, started: Instant) -> Result<()> {
        if let Some(u) = update {
            self.global_params.add_scaled_in_place(u.values(), 1.0)?;
        }
        let (train_loss, train_acc) = train_scores(&self.global_params, &eval.train_subset)?;
        let test = if eval.eval_every > 0 && (self.round + 1) % eval.eval_every == 0 {
            Some(test_scores(&self.global_params, &eval.test)?)
        } else {
            None
        };
        self.history.push(MetricsRow {
            round: self.round,
            cohort_delta: self.cohorts.iter().map(CohortRuntime::delta_spent).collect(),
            exhausted: self.cohorts.iter().map(CohortRuntime::is_exhausted).collect(),
            train_loss,
            train_acc,
            test,
            wall_ms: eval.record_timing.then(|| started.elapsed().as_millis() as u64),
        });
        self.round += 1;
        Ok(())
    }
}

/// Sums `deltas` in cohort order and scales by `1 / divisor`.
pub(crate) fn average(deltas: &[CohortDelta], divisor: usize, template: &ParamVector) -> Result<ParamVector> {
    let mut sum = ParamVector::zeros(template.shapes());
    for d in deltas {
        sum.add_scaled_in_place(d.delta.values(), 1.0)?;
    }
    sum.scale_in_place(1.0 / divisor as f64);
    Ok(sum)
}

/// Baseline server round: every cohort contributes (zero once exhausted) and
/// the deltas are averaged with divisor `C`.
pub fn dp_server_round(
    state: &mut FederationState,
    mechanism: &Mechanism,
    client: &ClientConfig,
    eval: &EvalPlan,
) -> Result<()> {
    let started = Instant::now();
    let mut deltas = Vec::with_capacity(state.cohorts.len());
    for c in 0..state.cohorts.len() {
        deltas.push(state.cohort_delta(c, mechanism, client)?);
    }
    let update = average(&deltas, state.cohorts.len(), &state.global_params)?;
    state.finish_round(Some(&update), eval, started)
}

/// Executes one server round of the given algorithm.
pub fn server_round(
    state: &mut FederationState,
    algorithm: &mut AlgorithmState,
    mechanism: &Mechanism,
    client: &ClientConfig,
    eval: &EvalPlan,
) -> Result<()> {
    match algorithm {
        AlgorithmState::Nonprivate | AlgorithmState::Dp => dp_server_round(state, mechanism, client, eval),
        AlgorithmState::DpR { schedule } => continual::dp_r_server_round(state, schedule, mechanism, client, eval),
        AlgorithmState::DpSi { si } => continual::dp_si_server_round(state, si, mechanism, client, eval),
    }
}

/// Repeats server rounds until every cohort is exhausted or `max_rounds`
/// rounds have run in total, then makes sure the last row carries test
/// scores.
pub fn run_training(
    state: &mut FederationState,
    algorithm: &mut AlgorithmState,
    mechanism: &Mechanism,
    client: &ClientConfig,
    eval: &EvalPlan,
    max_rounds: u64,
) -> Result<()> {
    while state.round < max_rounds && !state.all_exhausted() {
        server_round(state, algorithm, mechanism, client, eval)?;
    }
    finalize_history(state, eval)
}

/// Fills in test scores on the final row if the cadence skipped it.
pub fn finalize_history(state: &mut FederationState, eval: &EvalPlan) -> Result<()> {
    let params = state.global_params.clone();
    if let Some(last) = state.history.last_mut() {
        if last.test.is_none() {
            last.test = Some(test_scores(&params, &eval.test)?);
        }
    }
    Ok(())
}
