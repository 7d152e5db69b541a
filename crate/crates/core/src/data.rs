//! Dataset ingestion, normalization, synthetic generation and the non-iid
//! cohort/client partitioning.

use crate::nn::{Matrix, INPUT_WIDTH, NUM_CLASSES};
use crate::rng::{self, Stream};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Class names in label-id order. Id 0 is the benign class.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Benign",
    "Bot",
    "DoS attacks-GoldenEye",
    "DoS attacks-Hulk",
    "DoS attacks-SlowHTTPTest",
    "DoS attacks-Slowloris",
    "FTP-BruteForce",
    "Infiltration",
    "SSH-Bruteforce",
];

/// Per-class row counts of the full CSE-CIC-IDS2018 extract, in label-id order.
pub const TABLE1_COUNTS: [usize; NUM_CLASSES] = [671_244, 66_308, 9_801, 107_373, 32_673, 2_642, 44_816, 21_631, 43_512];

pub const BENIGN_ID: usize = 0;

/// Columns dropped before the 79 features are kept.
pub const DEFAULT_DROP_COLUMNS: [&str; 1] = ["Timestamp"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: CSV error: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: label column {column:?} not found in header")]
    MissingLabelColumn { path: PathBuf, column: String },
    #[error("{path}:{line}: unknown label {label:?}")]
    UnknownLabel { path: PathBuf, line: u64, label: String },
    #[error("{path}:{line}: expected {expected} fields, found {found}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {found} feature columns after dropping {dropped:?}, expected {expected}")]
    FeatureWidth {
        path: PathBuf,
        expected: usize,
        found: usize,
        dropped: Vec<String>,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("feature width mismatch: expected {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class {class} has {rows} row(s); stratified splitting needs at least 2")]
    TooFewRowsToStratify { class: usize, rows: usize },
    #[error("label {label} has {rows} row(s) for {clients} client(s) in cohort {cohort}")]
    InsufficientRows {
        cohort: usize,
        label: usize,
        rows: usize,
        clients: usize,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Maps a CSV label string to its class id. Matching ignores case and the
/// dataset's "Infilteration" spelling.
pub fn class_id(name: &str) -> Option<usize> {
    let norm = name.trim().to_ascii_lowercase();
    let norm = if norm == "infilteration" { "infiltration".to_string() } else { norm };
    CLASS_NAMES.iter().position(|c| c.to_ascii_lowercase() == norm)
}

/// Labeled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(DataError::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(DataError::InvalidArgument(format!("label id {bad} out of range")));
        }
        Ok(Self {
            features,
            labels,
            label_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn empty(width: usize) -> Self {
        Self {
            features: Matrix::zeros(0, width),
            labels: Vec::new(),
            label_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            label_names: self.label_names.clone(),
        }
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); NUM_CLASSES];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

/// How a CSV export is read.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    pub label_column: String,
    pub drop_columns: Vec<String>,
    /// Required feature count after dropping; `None` accepts any width.
    pub expected_width: Option<usize>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            label_column: "Label".into(),
            drop_columns: DEFAULT_DROP_COLUMNS.iter().map(|s| s.to_string()).collect(),
            expected_width: Some(INPUT_WIDTH),
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Reads a CICFlowMeter-style CSV. Cells that are not finite numbers are
/// replaced by the median of the finite cells in their column.
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<Dataset> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let wanted = options.label_column.trim().to_ascii_lowercase();
    let label_idx = headers
        .iter()
        .position(|h| h.trim().to_ascii_lowercase() == wanted)
        .ok_or_else(|| DataError::MissingLabelColumn {
            path: path.to_path_buf(),
            column: options.label_column.clone(),
        })?;
    let dropped: BTreeSet<String> = options
        .drop_columns
        .iter()
        .map(|c| c.trim().to_ascii_lowercase())
        .collect();
    let feature_idx: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|&(i, h)| i != label_idx && !dropped.contains(&h.trim().to_ascii_lowercase()))
        .map(|(i, _)| i)
        .collect();
    if let Some(expected) = options.expected_width {
        if feature_idx.len() != expected {
            return Err(DataError::FeatureWidth {
                path: path.to_path_buf(),
                expected,
                found: feature_idx.len(),
                dropped: options.drop_columns.clone(),
            });
        }
    }
    let width = feature_idx.len();
    let mut cells: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(DataError::MalformedRow {
                path: path.to_path_buf(),
                line,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let label = &record[label_idx];
        let id = class_id(label).ok_or_else(|| DataError::UnknownLabel {
            path: path.to_path_buf(),
            line,
            label: label.to_string(),
        })?;
        labels.push(id);
        for &i in &feature_idx {
            let v = record[i].trim().parse::<f64>().ok().filter(|v| v.is_finite());
            cells.push(v.unwrap_or(f64::NAN));
        }
    }
    let rows = labels.len();
    for c in 0..width {
        let mut finite: Vec<f64> = (0..rows)
            .map(|r| cells[r * width + c])
            .filter(|v| !v.is_nan())
            .collect();
        if finite.len() == rows {
            continue;
        }
        let fill = median(&mut finite);
        for r in 0..rows {
            let cell = &mut cells[r * width + c];
            if cell.is_nan() {
                *cell = fill;
            }
        }
    }
    let features = Matrix::from_vec(rows, width, cells).expect("row-major fill matches shape");
    Dataset::new(features, labels)
}

/// Per-feature z-score statistics from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Columns with a population standard deviation below this are treated as
/// constant and get std 1.
const DEGENERATE_STD: f64 = 1e-12;

pub fn fit_normalize(train: &Dataset) -> Result<NormStats> {
    if train.is_empty() {
        return Err(DataError::Empty);
    }
    let n = train.len() as f64;
    let width = train.width();
    let mut mean = vec![0.0; width];
    for r in 0..train.len() {
        for (m, &v) in mean.iter_mut().zip(train.features.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; width];
    for r in 0..train.len() {
        for ((s, &v), &m) in var.iter_mut().zip(train.features.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd < DEGENERATE_STD {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

pub fn apply_normalize(d: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if d.width() != stats.mean.len() && !d.is_empty() {
        return Err(DataError::WidthMismatch {
            expected: stats.mean.len(),
            actual: d.width(),
        });
    }
    let mut out = d.clone();
    for r in 0..out.len() {
        for ((v, m), s) in out.features.row_mut(r).iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Class-conditional Gaussian clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Rows per class, indexed by class id.
    pub counts: Vec<usize>,
    /// Distance of each class centre from the origin, in units of the
    /// per-feature noise standard deviation.
    pub separation: f64,
    pub width: usize,
    /// How far apart classes of the same attack family sit, from 0 (same
    /// centre) to 1 (independent centres, the default).
    #[serde(default = "one")]
    pub family_spread: f64,
}

fn one() -> f64 {
    1.0
}

/// Attack family of each class id: DoS variants share a family, as do the
/// two brute-force classes, and infiltration traffic resembles benign.
pub const CLASS_FAMILIES: [usize; NUM_CLASSES] = [0, 1, 2, 2, 2, 2, 3, 0, 3];

impl SynthSpec {
    /// Counts proportional to the full dataset's class histogram, apportioned
    /// by largest remainder so they sum to exactly `total`.
    pub fn table1_proportioned(total: usize, separation: f64) -> Self {
        Self {
            counts: apportion(&TABLE1_COUNTS, total),
            separation,
            width: INPUT_WIDTH,
            family_spread: 1.0,
        }
    }
}

pub fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let exact: Vec<f64> = weights
        .iter()
        .map(|&w| w as f64 * total as f64 / sum as f64)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// Draws `counts[c]` rows around a random centre for each class `c`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.counts.iter().all(|&c| c == 0) {
        return Err(DataError::InvalidArgument("all class counts are zero".into()));
    }
    if spec.counts.len() > NUM_CLASSES {
        return Err(DataError::InvalidArgument(format!(
            "{} class counts given, at most {NUM_CLASSES} classes",
            spec.counts.len()
        )));
    }
    if !(spec.separation > 0.0) || spec.width == 0 {
        return Err(DataError::InvalidArgument("separation and width must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.family_spread) {
        return Err(DataError::InvalidArgument("family spread must lie in [0, 1]".into()));
    }
    let mut rng = rng::stream(seed, Stream::Synthetic, &[]);
    let unit = |rng: &mut rand_chacha::ChaCha20Rng| -> Vec<f64> {
        let dir: Vec<f64> = (0..spec.width).map(|_| StandardNormal.sample(rng)).collect();
        let norm = crate::nn::l2_norm(&dir);
        dir.into_iter().map(|v| v / norm).collect()
    };
    let own: Vec<Vec<f64>> = (0..spec.counts.len()).map(|_| unit(&mut rng)).collect();
    let centres: Vec<Vec<f64>> = if spec.family_spread == 1.0 {
        own.into_iter()
            .map(|d| d.into_iter().map(|v| v * spec.separation).collect())
            .collect()
    } else {
        let families: Vec<Vec<f64>> = (0..=*CLASS_FAMILIES.iter().max().unwrap())
            .map(|_| unit(&mut rng))
            .collect();
        let s = spec.family_spread;
        let shared = (1.0 - s * s).sqrt();
        own.iter()
            .enumerate()
            .map(|(class, d)| {
                let fam = &families[CLASS_FAMILIES[class]];
                let mixed: Vec<f64> = d.iter().zip(fam).map(|(a, b)| s * a + shared * b).collect();
                let norm = crate::nn::l2_norm(&mixed);
                mixed.into_iter().map(|v| v / norm * spec.separation).collect()
            })
            .collect()
    };
    let total: usize = spec.counts.iter().sum();
    let mut features = Matrix::zeros(0, spec.width);
    let mut labels = Vec::with_capacity(total);
    let mut row = vec![0.0; spec.width];
    for (class, &count) in spec.counts.iter().enumerate() {
        for _ in 0..count {
            for (v, c) in row.iter_mut().zip(&centres[class]) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = c + z;
            }
            features.push_row(&row).expect("fixed width");
            labels.push(class);
        }
    }
    if features.rows() == 0 {
        features = Matrix::zeros(0, spec.width);
    }
    Dataset::new(features, labels)
}

/// Stratified split into (train, test). Deterministic in `seed`.
pub fn train_test_split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class, mut idx) in d.indices_by_class().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(DataError::TooFewRowsToStratify {
                class,
                rows: idx.len(),
            });
        }
        let mut rng = rng::stream(seed, Stream::TrainTestSplit, &[class as u64]);
        idx.shuffle(&mut rng);
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((d.subset(&train_idx), d.subset(&test_idx)))
}

/// Disjoint attack-label sets, one per cohort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortAssignment {
    pub cohort_label_sets: Vec<Vec<usize>>,
    pub benign_id: usize,
}

impl CohortAssignment {
    pub fn num_cohorts(&self) -> usize {
        self.cohort_label_sets.len()
    }
}

/// Randomly splits `attack_ids` into `num_cohorts` disjoint sets whose sizes
/// differ by at most one.
pub fn partition_cohorts(attack_ids: &[usize], num_cohorts: usize, seed: u64) -> Result<CohortAssignment> {
    let unique: BTreeSet<usize> = attack_ids.iter().copied().collect();
    if unique.contains(&BENIGN_ID) {
        return Err(DataError::InvalidArgument("benign id cannot be an attack label".into()));
    }
    if num_cohorts == 0 || num_cohorts > unique.len() {
        return Err(DataError::InvalidArgument(format!(
            "cannot split {} attack labels into {num_cohorts} cohorts",
            unique.len()
        )));
    }
    let mut ids: Vec<usize> = unique.into_iter().collect();
    ids.shuffle(&mut rng::stream(seed, Stream::CohortSplit, &[]));
    let mut sets = vec![Vec::new(); num_cohorts];
    for (i, id) in ids.into_iter().enumerate() {
        sets[i % num_cohorts].push(id);
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    Ok(CohortAssignment {
        cohort_label_sets: sets,
        benign_id: BENIGN_ID,
    })
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub cohort_id: usize,
    /// Distinct labels held, benign first.
    pub label_ids: Vec<usize>,
    pub data: Dataset,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Splits `n` items into `parts` contiguous chunk sizes differing by at most 1.
fn chunk_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|k| n / parts + usize::from(k < n % parts)).collect()
}

/// Attack labels held by each client of a cohort: a window of consecutive
/// labels, two per client when that covers the cohort's set, more otherwise.
fn client_label_windows(labels: &[usize], clients: usize) -> Vec<Vec<usize>> {
    let n = labels.len();
    let per_client = n.min(2).max(n.div_ceil(clients));
    (0..clients)
        .map(|k| (0..per_client).map(|j| labels[(k * per_client + j) % n]).collect())
        .collect()
}

/// Assigns rows to clients: every client holds benign rows plus rows of its
/// attack labels; rows of each label are divided near-uniformly among the
/// clients holding it, and benign rows among all clients of all cohorts.
pub fn partition_clients(
    d: &Dataset,
    assignment: &CohortAssignment,
    clients_per_cohort: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if clients_per_cohort == 0 {
        return Err(DataError::InvalidArgument("clients_per_cohort must be at least 1".into()));
    }
    if assignment.cohort_label_sets.iter().any(Vec::is_empty) {
        return Err(DataError::InvalidArgument("every cohort needs at least one attack label".into()));
    }
    let by_class = d.indices_by_class();
    let total_clients = clients_per_cohort * assignment.num_cohorts();
    let mut rows_per_client: Vec<Vec<usize>> = vec![Vec::new(); total_clients];
    let mut labels_per_client: Vec<Vec<usize>> = vec![vec![assignment.benign_id]; total_clients];

    let mut benign = by_class[assignment.benign_id].clone();
    if benign.len() < total_clients {
        return Err(DataError::InsufficientRows {
            cohort: 0,
            label: assignment.benign_id,
            rows: benign.len(),
            clients: total_clients,
        });
    }
    benign.shuffle(&mut rng::stream(seed, Stream::ClientSplit, &[assignment.benign_id as u64]));
    let mut start = 0;
    for (client, size) in chunk_sizes(benign.len(), total_clients).into_iter().enumerate() {
        rows_per_client[client].extend_from_slice(&benign[start..start + size]);
        start += size;
    }

    for (cohort, labels) in assignment.cohort_label_sets.iter().enumerate() {
        let windows = client_label_windows(labels, clients_per_cohort);
        let base = cohort * clients_per_cohort;
        for &label in labels {
            let holders: Vec<usize> = windows
                .iter()
                .enumerate()
                .filter(|(_, w)| w.contains(&label))
                .map(|(k, _)| base + k)
                .collect();
            let mut rows = by_class[label].clone();
            if rows.len() < holders.len() {
                return Err(DataError::InsufficientRows {
                    cohort,
                    label,
                    rows: rows.len(),
                    clients: holders.len(),
                });
            }
            rows.shuffle(&mut rng::stream(seed, Stream::ClientSplit, &[label as u64]));
            let mut start = 0;
            for (&client, size) in holders.iter().zip(chunk_sizes(rows.len(), holders.len())) {
                rows_per_client[client].extend_from_slice(&rows[start..start + size]);
                labels_per_client[client].push(label);
                start += size;
            }
        }
    }

    Ok(rows_per_client
        .into_iter()
        .zip(labels_per_client)
        .enumerate()
        .map(|(client_id, (mut rows, label_ids))| {
            rows.sort_unstable();
            ClientShard {
                client_id,
                cohort_id: client_id / clients_per_cohort,
                label_ids,
                data: d.subset(&rows),
            }
        })
        .collect())
}

/// Writes the shard manifest: one CSV line per client.
pub fn write_shard_manifest<W: Write>(out: W, shards: &[ClientShard]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["client_id", "cohort_id", "label_ids", "row_count", "label_row_counts"])?;
    for s in shards {
        let hist = s.data.histogram();
        let ids: Vec<String> = s.label_ids.iter().map(usize::to_string).collect();
        let counts: Vec<String> = s.label_ids.iter().map(|&l| format!("{l}:{}", hist[l])).collect();
        w.write_record([
            s.client_id.to_string(),
            s.cohort_id.to_string(),
            ids.join(";"),
            s.len().to_string(),
            counts.join(";"),
        ])?;
    }
    w.flush()
}

/// Rows per label held by each cohort's clients, for quick summaries.
pub fn cohort_histograms(shards: &[ClientShard]) -> BTreeMap<usize, [usize; NUM_CLASSES]> {
    let mut out: BTreeMap<usize, [usize; NUM_CLASSES]> = BTreeMap::new();
    for s in shards {
        let entry = out.entry(s.cohort_id).or_insert([0; NUM_CLASSES]);
        for (acc, h) in entry.iter_mut().zip(s.data.histogram()) {
            *acc += h;
        }
    }
    out
}

/// Deterministic subset of at most `max_rows` row indices.
pub fn sample_indices(len: usize, max_rows: usize, seed: u64) -> Vec<usize> {
    if max_rows == 0 || max_rows >= len {
        return (0..len).collect();
    }
    let mut rng = rng::stream(seed, Stream::EvalSubset, &[]);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx.truncate(max_rows);
    idx.sort_unstable();
    idx
}
