//! Experiment driver: builds runs from a config, checkpoints and resumes
//! them, relaxes exhausted cohorts, sweeps hyperparameters and reads and
//! writes the metrics CSV.

use crate::config::{Algorithm, ConfigError, DataSource, ExperimentConfig, OptimizerKind};
use crate::continual::{RehearsalSchedule, SIState};
use crate::data::{self, ClientShard, CohortAssignment, CsvOptions, DataError, Dataset, NormStats, SynthSpec};
use crate::federation::{
    self, AlgorithmState, ClientConfig, CohortRuntime, EvalPlan, FederationError, FederationState, Mechanism,
    MetricsRow, TestScores,
};
use crate::metrics::F1Report;
use crate::nn::{self, LayerShapes, NnError, OptimizerConfig, ParamVector, NUM_CLASSES};
use crate::privacy::{self, CohortLedger, NoiseSpec, PrivacyError, DEFAULT_ROUND_CAP};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("metrics CSV line {line}: {message}")]
    MetricsParse { line: u64, message: String },
    #[error("cannot relax: {0}")]
    Relax(String),
    #[error("unknown sweep parameter {0:?} (rho, gamma, sample_fraction)")]
    SweepParameter(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Normalized splits and the client partition derived from a config.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub norm: NormStats,
    pub assignment: CohortAssignment,
    pub shards: Vec<ClientShard>,
}

pub fn load_source(cfg: &ExperimentConfig) -> Result<Dataset> {
    let input_width = cfg.model_dims[0];
    match &cfg.data_source {
        DataSource::Synthetic => {
            let mut spec = SynthSpec::table1_proportioned(cfg.synth_rows, cfg.synth_separation);
            spec.width = input_width;
            spec.family_spread = cfg.synth_family_spread;
            Ok(data::synth_generate(&spec, crate::rng::derive_seed(cfg.partition_seed(), &[0]))?)
        }
        DataSource::Csv { path } => {
            let options = CsvOptions {
                label_column: cfg.csv_label_column.clone(),
                drop_columns: cfg.csv_drop_columns.clone(),
                expected_width: Some(input_width),
            };
            Ok(data::load_csv(path, &options)?)
        }
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let raw = load_source(cfg)?;
    let seed = cfg.partition_seed();
    let (train, test) = data::train_test_split(&raw, cfg.test_fraction, seed)?;
    let norm = data::fit_normalize(&train)?;
    let train = data::apply_normalize(&train, &norm)?;
    let test = data::apply_normalize(&test, &norm)?;
    let hist = train.histogram();
    let attacks: Vec<usize> = (0..NUM_CLASSES)
        .filter(|&c| c != data::BENIGN_ID && hist[c] > 0)
        .collect();
    let assignment = data::partition_cohorts(&attacks, cfg.num_cohorts, seed)?;
    let shards = data::partition_clients(&train, &assignment, cfg.clients_per_cohort, seed)?;
    Ok(PreparedData {
        train,
        test,
        norm,
        assignment,
        shards,
    })
}

/// Rounds each cohort may take part in before its budget is spent:
/// `rounds_to_exhaustion - 1`.
pub fn cohort_allowances(cfg: &ExperimentConfig) -> Result<Vec<u64>> {
    cfg.epsilons
        .iter()
        .map(|&eps| {
            let t = privacy::rounds_to_exhaustion(cfg.effective_q(), cfg.sigma, eps, cfg.delta_threshold, DEFAULT_ROUND_CAP)?;
            Ok(t - 1)
        })
        .collect()
}

fn client_config(cfg: &ExperimentConfig) -> ClientConfig {
    ClientConfig {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        optimizer: match cfg.optimizer {
            OptimizerKind::Adagrad => OptimizerConfig::Adagrad {
                learning_rate: cfg.learning_rate,
                stability: cfg.adagrad_stability,
            },
            OptimizerKind::Sgd => OptimizerConfig::Sgd {
                learning_rate: cfg.learning_rate,
            },
        },
    }
}

/// Per-cohort ledger state and query counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSnapshot {
    pub ledger: Option<CohortLedger>,
    pub client_queries: u64,
    pub participations: u64,
}

/// Everything needed to resume a run; the data are rebuilt from `config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub round: u64,
    pub global_params: Vec<f64>,
    pub cohorts: Vec<CohortSnapshot>,
    pub algorithm: AlgorithmState,
    /// Rows as recorded, without the end-of-run test scores.
    pub history: Vec<MetricsRow>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A training run in progress.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub data: PreparedData,
    pub state: FederationState,
    pub algorithm: AlgorithmState,
    pub mechanism: Mechanism,
    pub client: ClientConfig,
    pub eval: EvalPlan,
    pub max_rounds: u64,
}

impl Run {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let data = prepare_data(cfg)?;
        Self::with_data(cfg, data)
    }

    /// Builds a fresh run on already prepared data.
    pub fn with_data(cfg: &ExperimentConfig, data: PreparedData) -> Result<Self> {
        cfg.validate()?;
        let shapes = LayerShapes::new(cfg.model_dims.clone())?;
        let params = nn::init_params(&shapes, cfg.init_seed());
        let m = cfg.clients_per_round();
        let q = cfg.effective_q();
        let private = cfg.algorithm.is_private();
        let mut by_cohort: Vec<Vec<ClientShard>> = vec![Vec::new(); cfg.num_cohorts];
        for s in &data.shards {
            by_cohort[s.cohort_id].push(s.clone());
        }
        let mut cohorts = Vec::with_capacity(cfg.num_cohorts);
        for (c, shards) in by_cohort.into_iter().enumerate() {
            let eps = cfg.epsilons[c];
            let ledger = if private {
                Some(CohortLedger::new(eps, cfg.delta_threshold, q, cfg.sigma)?)
            } else {
                None
            };
            cohorts.push(CohortRuntime::new(c, shards, ledger, m, eps)?);
        }
        let state = FederationState::new(params, cohorts, cfg.training_seed())?;
        let allowances = cohort_allowances(cfg)?;
        let algorithm = match cfg.algorithm {
            Algorithm::Nonprivate => AlgorithmState::Nonprivate,
            Algorithm::Dp => AlgorithmState::Dp,
            Algorithm::DpR => {
                let t_max = cfg
                    .t_max
                    .unwrap_or_else(|| allowances.iter().copied().max().unwrap_or(0));
                let rhos: Vec<f64> = (0..cfg.num_cohorts).map(|c| cfg.rho_for(c)).collect();
                AlgorithmState::DpR {
                    schedule: RehearsalSchedule::new(&rhos, &allowances, t_max)?,
                }
            }
            Algorithm::DpSi => AlgorithmState::DpSi {
                si: SIState {
                    step: cfg.si_step,
                    ..SIState::new(cfg.num_cohorts, &state.global_params, cfg.gamma, cfg.xi)?
                },
            },
        };
        let mechanism = if private {
            Mechanism::Private(NoiseSpec::new(cfg.sensitivity, cfg.sigma)?)
        } else {
            Mechanism::NonPrivate
        };
        let max_rounds = match (cfg.max_rounds, private) {
            (Some(cap), _) => cap,
            (None, true) => u64::MAX,
            (None, false) => allowances.iter().copied().min().unwrap_or(0),
        };
        let subset = data::sample_indices(
            data.train.len(),
            cfg.train_eval_rows,
            crate::rng::derive_seed(cfg.partition_seed(), &[4]),
        );
        let eval = EvalPlan {
            train_subset: data.train.subset(&subset),
            test: data.test.clone(),
            eval_every: cfg.eval_every,
            record_timing: cfg.record_timing,
        };
        Ok(Self {
            config: cfg.clone(),
            data,
            state,
            algorithm,
            mechanism,
            client: client_config(cfg),
            eval,
            max_rounds,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.max_rounds || self.state.all_exhausted()
    }

    /// Runs server rounds until the run is finished or `stop` rounds have
    /// been executed in total.
    pub fn run_until(&mut self, stop: Option<u64>) -> Result<()> {
        let limit = stop.map_or(self.max_rounds, |s| s.min(self.max_rounds));
        while self.state.round < limit && !self.state.all_exhausted() {
            federation::server_round(&mut self.state, &mut self.algorithm, &self.mechanism, &self.client, &self.eval)?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        self.run_until(None)
    }

    /// History with test scores filled in on the last row.
    pub fn finalized_history(&self) -> Result<Vec<MetricsRow>> {
        let mut rows = self.state.history.clone();
        if let Some(last) = rows.last_mut() {
            if last.test.is_none() {
                last.test = Some(federation::test_scores(&self.state.global_params, &self.eval.test)?);
            }
        }
        Ok(rows)
    }

    pub fn final_report(&self) -> Result<F1Report> {
        Ok(federation::evaluate(&self.state.global_params, &self.eval.test)?)
    }

    pub fn final_scores(&self) -> Result<TestScores> {
        Ok(federation::test_scores(&self.state.global_params, &self.eval.test)?)
    }

    pub fn client_queries(&self) -> Vec<u64> {
        self.state.client_queries()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            round: self.state.round,
            global_params: self.state.global_params.values().to_vec(),
            cohorts: self
                .state
                .cohorts
                .iter()
                .map(|c| CohortSnapshot {
                    ledger: c.ledger.clone(),
                    client_queries: c.client_queries,
                    participations: c.participations,
                })
                .collect(),
            algorithm: self.algorithm.clone(),
            history: self.state.history.clone(),
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        let mut run = Run::new(&cp.config)?;
        if cp.cohorts.len() != run.state.cohorts.len() {
            return Err(HarnessError::Config(ConfigError::Invalid(format!(
                "checkpoint has {} cohorts, config {}",
                cp.cohorts.len(),
                run.state.cohorts.len()
            ))));
        }
        run.state.global_params = ParamVector::from_values(run.state.global_params.shapes(), cp.global_params.clone())?;
        for (c, snap) in run.state.cohorts.iter_mut().zip(&cp.cohorts) {
            c.ledger = snap.ledger.clone();
            c.client_queries = snap.client_queries;
            c.participations = snap.participations;
        }
        run.state.round = cp.round;
        run.state.history = cp.history.clone();
        run.algorithm = cp.algorithm.clone();
        Ok(run)
    }
}

/// Trains a config to completion.
pub fn train(cfg: &ExperimentConfig) -> Result<Run> {
    let mut run = Run::new(cfg)?;
    run.run_to_end()?;
    Ok(run)
}

/// Reopens `cohort`'s exhausted ledger for `extra_rounds` participations and
/// continues the checkpointed algorithm until every cohort is exhausted
/// again. The returned rows start with the checkpoint's final row.
pub fn relax(cp: &Checkpoint, cohort: usize, extra_rounds: u64) -> Result<(Run, Vec<MetricsRow>)> {
    let mut run = Run::from_checkpoint(cp)?;
    if !run.config.algorithm.is_private() {
        return Err(HarnessError::Relax("a nonprivate run has no privacy budget".into()));
    }
    let n = run.state.cohorts.len();
    if cohort >= n {
        return Err(HarnessError::Relax(format!("unknown cohort {cohort}; the run has {n}")));
    }
    if !run.state.all_exhausted() {
        return Err(HarnessError::Relax("every cohort must be exhausted first".into()));
    }
    let first = run
        .finalized_history()?
        .pop()
        .ok_or_else(|| HarnessError::Relax("checkpoint has no rounds".into()))?;
    let start = run.state.history.len();
    if extra_rounds > 0 {
        run.state.cohorts[cohort]
            .ledger
            .as_mut()
            .expect("private runs carry ledgers")
            .relax(extra_rounds)?;
        run.max_rounds = u64::MAX;
        run.run_to_end()?;
    }
    let mut rows = vec![first];
    if run.state.history.len() > start {
        rows.extend(run.finalized_history()?.into_iter().skip(start));
    }
    Ok((run, rows))
}

/// Column header of the metrics CSV for `num_cohorts` cohorts.
pub fn metrics_header(num_cohorts: usize) -> Vec<String> {
    let mut h = vec!["round".to_string()];
    h.extend((0..num_cohorts).map(|c| format!("cohort_{c}_delta")));
    h.extend(
        [
            "exhausted_flags",
            "train_loss",
            "train_acc",
            "test_micro_f1",
            "test_macro_f1",
            "test_weighted_f1",
            "wall_ms",
        ]
        .map(String::from),
    );
    h
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes rows as CSV. Floats use Rust's shortest round-trip formatting, so
/// [`read_metrics_csv`] recovers them exactly.
pub fn write_metrics_csv<W: Write>(out: W, num_cohorts: usize, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| HarnessError::MetricsParse {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(metrics_header(num_cohorts)).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.round.to_string()];
        rec.extend(r.cohort_delta.iter().map(|d| d.map_or_else(String::new, |d| format!("{d:e}"))));
        rec.push(r.exhausted.iter().map(|&e| if e { '1' } else { '0' }).collect());
        rec.push(r.train_loss.to_string());
        rec.push(r.train_acc.to_string());
        rec.push(opt(r.test.map(|t| t.micro_f1)));
        rec.push(opt(r.test.map(|t| t.macro_f1)));
        rec.push(opt(r.test.map(|t| t.weighted_f1)));
        rec.push(opt(r.wall_ms));
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::MetricsParse {
        line: 0,
        message: e.to_string(),
    })
}

pub fn metrics_csv_string(num_cohorts: usize, rows: &[MetricsRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, num_cohorts, rows)?;
    Ok(String::from_utf8(buf).expect("CSV writer emits UTF-8"))
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| HarnessError::MetricsParse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let num_cohorts = headers.iter().filter(|h| h.ends_with("_delta")).count();
    if headers.iter().collect::<Vec<_>>() != metrics_header(num_cohorts) {
        return Err(HarnessError::MetricsParse {
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| HarnessError::MetricsParse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |field: &str, value: &str| HarnessError::MetricsParse {
            line,
            message: format!("bad {field} {value:?}"),
        };
        fn num<T: FromStr>(s: &str) -> Option<T> {
            s.parse().ok()
        }
        fn maybe<T: FromStr>(s: &str) -> std::result::Result<Option<T>, ()> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| ())
            }
        }
        let get = |i: usize| record.get(i).unwrap_or("");
        let round = num(get(0)).ok_or_else(|| bad("round", get(0)))?;
        let mut cohort_delta = Vec::with_capacity(num_cohorts);
        for c in 0..num_cohorts {
            cohort_delta.push(maybe::<f64>(get(1 + c)).map_err(|_| bad("delta", get(1 + c)))?);
        }
        let base = 1 + num_cohorts;
        let flags = get(base);
        if flags.len() != num_cohorts || !flags.chars().all(|ch| ch == '0' || ch == '1') {
            return Err(bad("exhausted_flags", flags));
        }
        let exhausted = flags.chars().map(|ch| ch == '1').collect();
        let train_loss = num(get(base + 1)).ok_or_else(|| bad("train_loss", get(base + 1)))?;
        let train_acc = num(get(base + 2)).ok_or_else(|| bad("train_acc", get(base + 2)))?;
        let scores: Vec<Option<f64>> = (3..6)
            .map(|k| maybe::<f64>(get(base + k)).map_err(|_| bad("test score", get(base + k))))
            .collect::<Result<_>>()?;
        let test = match (scores[0], scores[1], scores[2]) {
            (Some(micro_f1), Some(macro_f1), Some(weighted_f1)) => Some(TestScores {
                micro_f1,
                macro_f1,
                weighted_f1,
            }),
            (None, None, None) => None,
            _ => return Err(bad("test scores", "partially filled")),
        };
        let wall_ms = maybe::<u64>(get(base + 6)).map_err(|_| bad("wall_ms", get(base + 6)))?;
        rows.push(MetricsRow {
            round,
            cohort_delta,
            exhausted,
            train_loss,
            train_acc,
            test,
            wall_ms,
        });
    }
    Ok(rows)
}

/// Output file names for a run: `<stem>_<config hash>_<seed>.<ext>`.
pub fn output_path(dir: &Path, stem: &str, cfg: &ExperimentConfig, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{}_{}.{ext}", cfg.hash(), cfg.seed))
}

/// Files written by [`write_run_outputs`].
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
}

/// Writes the metrics CSV, checkpoint and final F1 report of a run.
pub fn write_run_outputs(run: &Run, rows: &[MetricsRow], dir: &Path, stem: &str) -> Result<RunOutputs> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cfg = &run.config;
    let metrics = output_path(dir, &format!("{stem}metrics"), cfg, "csv");
    let file = std::fs::File::create(&metrics).map_err(io_err(&metrics))?;
    write_metrics_csv(file, cfg.num_cohorts, rows)?;
    let checkpoint = output_path(dir, &format!("{stem}checkpoint"), cfg, "json");
    run.checkpoint().save(&checkpoint)?;
    let report = output_path(dir, &format!("{stem}report"), cfg, "json");
    let text = serde_json::to_string_pretty(&run.final_report()?)?;
    std::fs::write(&report, text).map_err(io_err(&report))?;
    Ok(RunOutputs {
        metrics,
        checkpoint,
        report,
    })
}

/// Writes the shard manifest and normalization statistics.
pub fn write_partition(cfg: &ExperimentConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let data = prepare_data(cfg)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = output_path(dir, "manifest", cfg, "csv");
    let file = std::fs::File::create(&manifest).map_err(io_err(&manifest))?;
    data::write_shard_manifest(file, &data.shards).map_err(io_err(&manifest))?;
    let stats = output_path(dir, "norm_stats", cfg, "json");
    std::fs::write(&stats, serde_json::to_string(&data.norm)?).map_err(io_err(&stats))?;
    Ok((manifest, stats))
}

/// Hyperparameters that can be swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Rho,
    Gamma,
    SampleFraction,
}

impl FromStr for SweepParameter {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rho" => Ok(SweepParameter::Rho),
            "gamma" => Ok(SweepParameter::Gamma),
            "sample_fraction" | "sample-fraction" => Ok(SweepParameter::SampleFraction),
            other => Err(HarnessError::SweepParameter(other.into())),
        }
    }
}

impl std::fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParameter::Rho => "rho",
            SweepParameter::Gamma => "gamma",
            SweepParameter::SampleFraction => "sample_fraction",
        })
    }
}

impl SweepParameter {
    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) {
        match self {
            SweepParameter::Rho => cfg.rho = vec![value],
            SweepParameter::Gamma => cfg.gamma = value,
            SweepParameter::SampleFraction => cfg.sample_fraction = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub rounds: u64,
    /// Largest client-query count over cohorts relative to its bound
    /// `allowance * m`; at most 1 for private runs.
    pub max_query_ratio: f64,
}

/// Median over seeds for one swept value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub rounds: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ratio of each cohort's client queries to `allowance * m`.
pub fn query_ratios(run: &Run) -> Result<Vec<f64>> {
    let allowances = cohort_allowances(&run.config)?;
    let m = run.config.clients_per_round() as f64;
    Ok(run
        .client_queries()
        .iter()
        .zip(allowances)
        .map(|(&q, a)| q as f64 / (a as f64 * m))
        .collect())
}

/// One full training run per value per seed.
pub fn sweep(
    base: &ExperimentConfig,
    parameter: SweepParameter,
    values: &[f64],
    seeds: &[u64],
) -> Result<(Vec<SweepRow>, Vec<SweepSummary>)> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &value in values {
        let mut per_value = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            parameter.apply(&mut cfg, value);
            let run = train(&cfg)?;
            let scores = run.final_scores()?;
            let ratios = query_ratios(&run)?;
            per_value.push(SweepRow {
                value,
                seed,
                micro_f1: scores.micro_f1,
                macro_f1: scores.macro_f1,
                weighted_f1: scores.weighted_f1,
                rounds: run.state.round,
                max_query_ratio: ratios.into_iter().fold(0.0, f64::max),
            });
        }
        let col = |f: fn(&SweepRow) -> f64| median(&per_value.iter().map(f).collect::<Vec<_>>());
        summary.push(SweepSummary {
            value,
            micro_f1: col(|r| r.micro_f1),
            macro_f1: col(|r| r.macro_f1),
            weighted_f1: col(|r| r.weighted_f1),
            rounds: col(|r| r.rounds as f64),
        });
        rows.extend(per_value);
    }
    Ok((rows, summary))
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow], summary: &[SweepSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| HarnessError::MetricsParse {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(["value", "seed", "micro_f1", "macro_f1", "weighted_f1", "rounds"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.seed.to_string(),
            r.micro_f1.to_string(),
            r.macro_f1.to_string(),
            r.weighted_f1.to_string(),
            r.rounds.to_string(),
        ])
        .map_err(err)?;
    }
    for s in summary {
        w.write_record([
            s.value.to_string(),
            "median".to_string(),
            s.micro_f1.to_string(),
            s.macro_f1.to_string(),
            s.weighted_f1.to_string(),
            s.rounds.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::MetricsParse {
        line: 0,
        message: e.to_string(),
    })
}

/// `(round, delta)` after each round until exhaustion, and the exhaustion
/// round.
pub fn accountant_table(q: f64, sigma: f64, epsilon: f64, delta_threshold: f64) -> Result<(Vec<(u64, f64)>, u64)> {
    let rows = privacy::delta_trajectory(q, sigma, epsilon, delta_threshold, DEFAULT_ROUND_CAP)?;
    let exhaustion = rows.last().map_or(0, |r| r.0);
    Ok((rows, exhaustion))
}

/// Test-set F1 of a checkpoint's parameters.
pub fn evaluate_checkpoint(cp: &Checkpoint) -> Result<F1Report> {
    Ok(Run::from_checkpoint(cp)?.final_report()?)
}
