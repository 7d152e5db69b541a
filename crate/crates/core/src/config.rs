//! Experiment configuration: a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Keys not listed in [`KEYS`] are rejected, as are repeated
//! keys. Every key has a default, so an empty document is a valid config.

use crate::continual::SiStep;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("{key}: cannot parse {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Nonprivate,
    Dp,
    DpR,
    DpSi,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Nonprivate, Algorithm::Dp, Algorithm::DpR, Algorithm::DpSi];

    pub fn is_private(self) -> bool {
        self != Algorithm::Nonprivate
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Nonprivate => "nonprivate",
            Algorithm::Dp => "dp",
            Algorithm::DpR => "dp-r",
            Algorithm::DpSi => "dp-si",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nonprivate" | "non-private" => Ok(Algorithm::Nonprivate),
            "dp" => Ok(Algorithm::Dp),
            "dp-r" | "dpr" => Ok(Algorithm::DpR),
            "dp-si" | "dpsi" => Ok(Algorithm::DpSi),
            other => Err(format!("unknown algorithm {other:?} (nonprivate, dp, dp-r, dp-si)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adagrad,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer {other:?} (adagrad, sgd)")),
        }
    }
}

/// Where training rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub num_cohorts: usize,
    /// Privacy target per cohort.
    pub epsilons: Vec<f64>,
    pub clients_per_cohort: usize,
    pub sample_fraction: f64,
    pub sigma: f64,
    pub sensitivity: f64,
    pub delta_threshold: f64,
    pub model_dims: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub adagrad_stability: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Rehearsal ratio per cohort; a single value applies to every cohort.
    pub rho: Vec<f64>,
    pub gamma: f64,
    pub xi: f64,
    pub si_step: SiStep,
    /// Known maximum round count for rehearsal spacing; `None` = the largest
    /// cohort allowance.
    pub t_max: Option<u64>,
    pub data_source: DataSource,
    pub synth_rows: usize,
    pub synth_separation: f64,
    /// Within-family spread of synthetic class centres, in [0, 1].
    pub synth_family_spread: f64,
    pub csv_label_column: String,
    pub csv_drop_columns: Vec<String>,
    pub test_fraction: f64,
    pub seed: u64,
    pub partition_seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub training_seed: Option<u64>,
    pub eval_every: u64,
    /// Round cap; `None` = run until every cohort is exhausted (private) or
    /// for the strictest cohort's allowance (nonprivate).
    pub max_rounds: Option<u64>,
    /// Rows of the training split used for the per-round train loss and
    /// accuracy; 0 = all.
    pub train_eval_rows: usize,
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Dp,
            num_cohorts: 2,
            epsilons: vec![6.0, 8.0],
            clients_per_cohort: 100,
            sample_fraction: 0.05,
            sigma: 1.0,
            sensitivity: 1.0,
            delta_threshold: 1e-5,
            model_dims: vec![79, 79, 128, 9],
            optimizer: OptimizerKind::Adagrad,
            learning_rate: 0.1,
            adagrad_stability: crate::nn::DEFAULT_ADAGRAD_STABILITY,
            batch_size: 10,
            local_epochs: 1,
            rho: vec![0.25],
            gamma: 1.0,
            xi: 0.1,
            si_step: SiStep::Proximal,
            t_max: None,
            data_source: DataSource::Synthetic,
            synth_rows: 25_000,
            synth_separation: 6.0,
            synth_family_spread: 1.0,
            csv_label_column: "Label".into(),
            csv_drop_columns: vec!["Timestamp".into()],
            test_fraction: 0.2,
            seed: 0,
            partition_seed: None,
            init_seed: None,
            training_seed: None,
            eval_every: 5,
            max_rounds: None,
            train_eval_rows: 2000,
            record_timing: false,
        }
    }
}

/// Every accepted key, in canonical output order.
pub const KEYS: [&str; 36] = [
    "algorithm",
    "num_cohorts",
    "epsilons",
    "clients_per_cohort",
    "sample_fraction",
    "sigma",
    "sensitivity",
    "delta_threshold",
    "model_dims",
    "optimizer",
    "learning_rate",
    "adagrad_stability",
    "batch_size",
    "local_epochs",
    "rho",
    "gamma",
    "xi",
    "si_step",
    "t_max",
    "data_source",
    "csv_path",
    "synth_rows",
    "synth_separation",
    "synth_family_spread",
    "csv_label_column",
    "csv_drop_columns",
    "test_fraction",
    "seed",
    "partition_seed",
    "init_seed",
    "training_seed",
    "eval_every",
    "max_rounds",
    "train_eval_rows",
    "record_timing",
    "sigma_schedule",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    if value.trim().eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: fmt::Display>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn auto<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl ExperimentConfig {
    /// The defaults with a single-layer (softmax regression) model. With only
    /// five clients sampled per round the Gaussian noise swamps the deeper
    /// default network, while the linear model still learns and forgets in a
    /// way that separates the four algorithms.
    pub fn desk_profile() -> Self {
        Self {
            model_dims: vec![crate::nn::INPUT_WIDTH, crate::nn::NUM_CLASSES],
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut csv_path: Option<PathBuf> = None;
        let mut source: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let key = key.trim();
            let value = value.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey { line, key: key.into() });
            }
            match key {
                "algorithm" => cfg.algorithm = parse(key, value)?,
                "num_cohorts" => cfg.num_cohorts = parse(key, value)?,
                "epsilons" => cfg.epsilons = parse_list(key, value)?,
                "clients_per_cohort" => cfg.clients_per_cohort = parse(key, value)?,
                "sample_fraction" => cfg.sample_fraction = parse(key, value)?,
                "sigma" => cfg.sigma = parse(key, value)?,
                "sensitivity" => cfg.sensitivity = parse(key, value)?,
                "delta_threshold" => cfg.delta_threshold = parse(key, value)?,
                "model_dims" => cfg.model_dims = parse_list(key, value)?,
                "optimizer" => cfg.optimizer = parse(key, value)?,
                "learning_rate" => cfg.learning_rate = parse(key, value)?,
                "adagrad_stability" => cfg.adagrad_stability = parse(key, value)?,
                "batch_size" => cfg.batch_size = parse(key, value)?,
                "local_epochs" => cfg.local_epochs = parse(key, value)?,
                "rho" => cfg.rho = parse_list(key, value)?,
                "gamma" => cfg.gamma = parse(key, value)?,
                "xi" => cfg.xi = parse(key, value)?,
                "si_step" => cfg.si_step = parse(key, value)?,
                "t_max" => cfg.t_max = parse_auto(key, value)?,
                "data_source" => source = Some(value.to_ascii_lowercase()),
                "csv_path" => csv_path = Some(PathBuf::from(value)),
                "synth_rows" => cfg.synth_rows = parse(key, value)?,
                "synth_separation" => cfg.synth_separation = parse(key, value)?,
                "synth_family_spread" => cfg.synth_family_spread = parse(key, value)?,
                "csv_label_column" => cfg.csv_label_column = value.to_string(),
                "csv_drop_columns" => {
                    cfg.csv_drop_columns = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                "test_fraction" => cfg.test_fraction = parse(key, value)?,
                "seed" => cfg.seed = parse(key, value)?,
                "partition_seed" => cfg.partition_seed = parse_auto(key, value)?,
                "init_seed" => cfg.init_seed = parse_auto(key, value)?,
                "training_seed" => cfg.training_seed = parse_auto(key, value)?,
                "eval_every" => cfg.eval_every = parse(key, value)?,
                "max_rounds" => cfg.max_rounds = parse_auto(key, value)?,
                "train_eval_rows" => cfg.train_eval_rows = parse(key, value)?,
                "record_timing" => cfg.record_timing = parse(key, value)?,
                "sigma_schedule" => {
                    if !value.eq_ignore_ascii_case("constant") {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "only a constant sigma is supported".into(),
                        });
                    }
                }
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.data_source = match (source.as_deref(), csv_path) {
            (None | Some("synthetic"), None) => DataSource::Synthetic,
            (None | Some("csv"), Some(path)) => DataSource::Csv { path },
            (Some("csv"), None) => return Err(ConfigError::Invalid("data_source = csv needs csv_path".into())),
            (Some("synthetic"), Some(_)) => {
                return Err(ConfigError::Invalid("csv_path given with data_source = synthetic".into()))
            }
            (Some(other), _) => {
                return Err(ConfigError::BadValue {
                    key: "data_source".into(),
                    value: other.into(),
                    reason: "expected synthetic or csv".into(),
                })
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.num_cohorts == 0 {
            return bad("num_cohorts must be at least 1".into());
        }
        if self.epsilons.len() != self.num_cohorts {
            return bad(format!("{} epsilons for {} cohorts", self.epsilons.len(), self.num_cohorts));
        }
        if self.epsilons.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return bad("every epsilon must be positive".into());
        }
        if self.rho.len() != 1 && self.rho.len() != self.num_cohorts {
            return bad(format!("rho needs 1 or {} values", self.num_cohorts));
        }
        if self.rho.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("rho must lie in [0, 1)".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad("sample_fraction must lie in (0, 1]".into());
        }
        if self.clients_per_cohort == 0 {
            return bad("clients_per_cohort must be at least 1".into());
        }
        if !(self.sensitivity > 0.0) || !(self.sigma >= 0.0) {
            return bad("sensitivity must be positive and sigma nonnegative".into());
        }
        if self.algorithm.is_private() && !(self.sigma > 0.0) {
            return bad("private algorithms need sigma > 0".into());
        }
        if !(self.delta_threshold > 0.0 && self.delta_threshold < 1.0) {
            return bad("delta_threshold must lie in (0, 1)".into());
        }
        if self.model_dims.len() < 2 || self.model_dims.contains(&0) {
            return bad("model_dims needs at least two positive widths".into());
        }
        if self.model_dims.last() != Some(&crate::nn::NUM_CLASSES) {
            return bad(format!("the output width must be {}", crate::nn::NUM_CLASSES));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.adagrad_stability > 0.0) {
            return bad("learning_rate and adagrad_stability must be positive".into());
        }
        if !(self.gamma >= 0.0) || !(self.xi > 0.0) {
            return bad("gamma must be nonnegative and xi positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)".into());
        }
        if !(self.synth_separation > 0.0) {
            return bad("synth_separation must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.synth_family_spread) {
            return bad("synth_family_spread must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Clients sampled per round: `round(q * K)`, at least 1.
    pub fn clients_per_round(&self) -> usize {
        ((self.sample_fraction * self.clients_per_cohort as f64).round() as usize).clamp(1, self.clients_per_cohort)
    }

    /// Sampling fraction actually used by the accountant, `m / K`.
    pub fn effective_q(&self) -> f64 {
        self.clients_per_round() as f64 / self.clients_per_cohort as f64
    }

    pub fn rho_for(&self, cohort: usize) -> f64 {
        if self.rho.len() == 1 {
            self.rho[0]
        } else {
            self.rho[cohort]
        }
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition_seed
            .unwrap_or_else(|| crate::rng::derive_seed(self.seed, &[1]))
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or_else(|| crate::rng::derive_seed(self.seed, &[2]))
    }

    pub fn training_seed(&self) -> u64 {
        self.training_seed
            .unwrap_or_else(|| crate::rng::derive_seed(self.seed, &[3]))
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("algorithm", self.algorithm.to_string());
        put("num_cohorts", self.num_cohorts.to_string());
        put("epsilons", join(&self.epsilons));
        put("clients_per_cohort", self.clients_per_cohort.to_string());
        put("sample_fraction", self.sample_fraction.to_string());
        put("sigma", self.sigma.to_string());
        put("sensitivity", self.sensitivity.to_string());
        put("delta_threshold", self.delta_threshold.to_string());
        put("model_dims", join(&self.model_dims));
        put("optimizer", self.optimizer.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("adagrad_stability", self.adagrad_stability.to_string());
        put("batch_size", self.batch_size.to_string());
        put("local_epochs", self.local_epochs.to_string());
        put("rho", join(&self.rho));
        put("gamma", self.gamma.to_string());
        put("xi", self.xi.to_string());
        put("si_step", self.si_step.to_string());
        put("t_max", auto(&self.t_max));
        match &self.data_source {
            DataSource::Synthetic => put("data_source", "synthetic".into()),
            DataSource::Csv { path } => {
                put("data_source", "csv".into());
                put("csv_path", path.display().to_string());
            }
        }
        put("synth_rows", self.synth_rows.to_string());
        put("synth_separation", self.synth_separation.to_string());
        put("synth_family_spread", self.synth_family_spread.to_string());
        put("csv_label_column", self.csv_label_column.clone());
        put("csv_drop_columns", self.csv_drop_columns.join(","));
        put("test_fraction", self.test_fraction.to_string());
        put("seed", self.seed.to_string());
        put("partition_seed", auto(&self.partition_seed));
        put("init_seed", auto(&self.init_seed));
        put("training_seed", auto(&self.training_seed));
        put("eval_every", self.eval_every.to_string());
        put("max_rounds", auto(&self.max_rounds));
        put("train_eval_rows", self.train_eval_rows.to_string());
        put("record_timing", self.record_timing.to_string());
        out
    }

    /// Short stable digest of everything except the seed, used in output
    /// file names.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut unseeded = self.clone();
        unseeded.seed = 0;
        let digest = Sha256::digest(unseeded.to_text().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}
