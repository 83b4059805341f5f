//! Synthetic multi-task data, CSV ingestion and task-block batching.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::FeatureBatch;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {reason}")]
    Parse { path: PathBuf, line: u64, reason: String },
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("split is empty")]
    EmptySplit,
}

impl DataError {
    pub fn is_validation(&self) -> bool {
        !matches!(self, DataError::Io { .. })
    }

    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        DataError::Invalid {
            field,
            reason: reason.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Parameters of the synthetic multi-task generator.
///
/// Task `i` labels a standard-normal feature vector `x` by `sign(wᵢ·x)` with
/// `wᵢ = α·w_shared + β·vᵢ`, then flips the label with probability `noise`.
/// Trained tasks have IDs `1..=n_tasks`; the `unseen_tasks` that follow are
/// written to the test split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub d_raw: usize,
    /// Rows per task, trained tasks first then unseen ones.
    pub task_rows: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub noise: f64,
    /// Pairs `(i, j)` for which `w_j = −w_i`.
    pub conflict_pairs: Vec<(usize, usize)>,
    pub unseen_tasks: usize,
    /// Unseen tasks use the shared direction alone (`w = α·w_shared`).
    pub unseen_shared_rule: bool,
    pub train_frac: f64,
    pub calibration_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Nine trained tasks (task 3 down-sampled to 200 rows) plus two unseen
    /// tasks, 16 raw features, 10% label noise.
    fn default() -> Self {
        let mut task_rows = vec![2000; 11];
        task_rows[2] = 200;
        SyntheticSpec {
            n_tasks: 9,
            d_raw: 16,
            task_rows,
            alpha: 1.0,
            beta: 1.0,
            noise: 0.1,
            conflict_pairs: Vec::new(),
            unseen_tasks: 2,
            unseen_shared_rule: false,
            train_frac: 0.7,
            calibration_frac: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn total_tasks(&self) -> usize {
        self.n_tasks + self.unseen_tasks
    }

    pub fn unseen_task_ids(&self) -> Vec<usize> {
        (self.n_tasks + 1..=self.total_tasks()).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..0.5).contains(&self.noise) {
            return Err(DataError::invalid("noise", format!("{} is outside [0, 0.5)", self.noise)));
        }
        if self.d_raw == 0 {
            return Err(DataError::invalid("d_raw", "at least one feature is required"));
        }
        if self.total_tasks() == 0 {
            return Err(DataError::invalid("n_tasks", "at least one task is required"));
        }
        if self.task_rows.len() != self.total_tasks() {
            return Err(DataError::invalid(
                "task_rows",
                format!("{} counts given for {} tasks", self.task_rows.len(), self.total_tasks()),
            ));
        }
        if self.task_rows.contains(&0) {
            return Err(DataError::invalid("task_rows", "every task needs at least one row"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataError::invalid(name, "must be finite and non-negative"));
            }
        }
        let fracs_ok = (0.0..=1.0).contains(&self.train_frac)
            && (0.0..=1.0).contains(&self.calibration_frac)
            && self.train_frac + self.calibration_frac <= 1.0 + 1e-12;
        if !fracs_ok {
            return Err(DataError::invalid("train_frac", "split fractions must lie in [0, 1] and sum to at most 1"));
        }
        for &(i, j) in &self.conflict_pairs {
            if i == j || i == 0 || j == 0 || i > self.total_tasks() || j > self.total_tasks() {
                return Err(DataError::invalid("conflict_pairs", format!("({i}, {j}) is not a pair of distinct tasks")));
            }
        }
        Ok(())
    }

    /// Ground-truth rule vectors `w_1 … w_{total}` (index `i − 1`).
    pub fn task_weights(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shared = unit_vector(self.d_raw, &mut rng);
        let mut weights: Vec<Vec<f64>> = (1..=self.total_tasks())
            .map(|task| {
                if task > self.n_tasks && self.unseen_shared_rule {
                    return shared.iter().map(|s| self.alpha * s).collect();
                }
                let mut rng = task_rng(self.seed, task, 0);
                let own = unit_vector(self.d_raw, &mut rng);
                shared
                    .iter()
                    .zip(&own)
                    .map(|(s, v)| self.alpha * s + self.beta * v)
                    .collect()
            })
            .collect();
        for &(i, j) in &self.conflict_pairs {
            weights[j - 1] = weights[i - 1].iter().map(|v| -v).collect();
        }
        weights
    }
}

/// Independent stream per (task, purpose) so generation order never matters.
fn task_rng(seed: u64, task: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task as u64) << 8) | purpose);
    rng
}

fn unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Calibration, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Calibration => "calibration.csv",
            Split::Test => "test.csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub task_id: usize,
    pub label: f32,
    pub features: Vec<f32>,
    pub soft_label: Option<f32>,
}

/// Which target column to train against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Hard,
    Soft,
}

/// Rows of one split. Every row has `d_raw` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_raw: usize,
    pub rows: Vec<Example>,
}

impl Dataset {
    pub fn new(d_raw: usize, rows: Vec<Example>) -> Result<Self, DataError> {
        if let Some(r) = rows.iter().position(|r| r.features.len() != d_raw) {
            return Err(DataError::invalid("rows", format!("row {r} has {} features, expected {d_raw}", rows[r].features.len())));
        }
        Ok(Dataset { d_raw, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_soft_labels(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.soft_label.is_some())
    }

    pub fn task_ids(&self) -> BTreeSet<usize> {
        self.rows.iter().map(|r| r.task_id).collect()
    }

    /// Rows whose task ID satisfies `keep`.
    pub fn filter_tasks(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        Dataset {
            d_raw: self.d_raw,
            rows: self.rows.iter().filter(|r| keep(r.task_id)).cloned().collect(),
        }
    }

    /// Indices of rows belonging to `task`.
    pub fn indices_of(&self, task: usize) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].task_id == task).collect()
    }

    pub fn hard_labels(&self) -> Vec<f32> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Gathers `indices` into a batch, taking targets from `source`. Task IDs
    /// are passed through `map_task`.
    pub fn batch(
        &self,
        indices: &[usize],
        source: LabelSource,
        map_task: impl Fn(usize) -> usize,
    ) -> Result<FeatureBatch, DataError> {
        if indices.is_empty() {
            return Err(DataError::EmptySplit);
        }
        let mut features = Vec::with_capacity(indices.len() * self.d_raw);
        let mut ids = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = &self.rows[i];
            features.extend_from_slice(&r.features);
            ids.push(map_task(r.task_id));
            labels.push(match source {
                LabelSource::Hard => r.label,
                LabelSource::Soft => r
                    .soft_label
                    .ok_or_else(|| DataError::invalid("soft_label", format!("row {i} has no soft label")))?,
            });
        }
        let features = Tensor::new(vec![indices.len(), self.d_raw], features)
            .map_err(|e| DataError::invalid("features", e.to_string()))?;
        FeatureBatch::new(features, ids, labels).map_err(|e| DataError::invalid("batch", e.to_string()))
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self, source: LabelSource, map_task: impl Fn(usize) -> usize) -> Result<FeatureBatch, DataError> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, source, map_task)
    }
}

/// Train, calibration and test splits produced by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub train: Dataset,
    pub calibration: Dataset,
    pub test: Dataset,
    pub unseen_task_ids: Vec<usize>,
}

impl SplitData {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Calibration => &self.calibration,
            Split::Test => &self.test,
        }
    }
}

/// Generates the synthetic corpus described by `spec`.
///
/// Each task draws its rows from its own seeded stream, so the output is
/// bit-identical for a given spec regardless of generation order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SplitData, DataError> {
    spec.validate()?;
    let weights = spec.task_weights();
    let mut out = SplitData {
        train: Dataset { d_raw: spec.d_raw, rows: Vec::new() },
        calibration: Dataset { d_raw: spec.d_raw, rows: Vec::new() },
        test: Dataset { d_raw: spec.d_raw, rows: Vec::new() },
        unseen_task_ids: spec.unseen_task_ids(),
    };
    for task in 1..=spec.total_tasks() {
        let n = spec.task_rows[task - 1];
        let w = &weights[task - 1];
        let mut rng = task_rng(spec.seed, task, 1);
        let unseen = task > spec.n_tasks;
        let n_train = if unseen { 0 } else { (n as f64 * spec.train_frac).round() as usize };
        let n_cal = if unseen {
            0
        } else {
            ((n as f64 * spec.calibration_frac).round() as usize).min(n - n_train)
        };
        for k in 0..n {
            let features: Vec<f32> = (0..spec.d_raw)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32
                })
                .collect();
            let margin: f64 = features.iter().zip(w).map(|(&x, &wi)| f64::from(x) * wi).sum();
            let bayes = margin > 0.0;
            let flip = rng.random::<f64>() < spec.noise;
            let label = if bayes != flip { 1.0 } else { 0.0 };
            let soft = if bayes { 1.0 - spec.noise } else { spec.noise } as f32;
            let row = Example {
                task_id: task,
                label,
                features,
                soft_label: Some(soft),
            };
            let split = if k < n_train {
                &mut out.train
            } else if k < n_train + n_cal {
                &mut out.calibration
            } else {
                &mut out.test
            };
            split.rows.push(row);
        }
    }
    Ok(out)
}

/// Writes a split as CSV with header `task_id,label,f1,…,f{d_raw}[,soft_label]`.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<(), DataError> {
    let with_soft = data.has_soft_labels();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["task_id".to_string(), "label".to_string()];
    header.extend((1..=data.d_raw).map(|i| format!("f{i}")));
    if with_soft {
        header.push("soft_label".into());
    }
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for r in &data.rows {
        let mut rec = vec![r.task_id.to_string(), r.label.to_string()];
        rec.extend(r.features.iter().map(f32::to_string));
        if with_soft {
            rec.push(r.soft_label.unwrap_or_default().to_string());
        }
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> DataError {
    DataError::io(path, std::io::Error::other(e))
}

/// Reads a CSV written by [`write_csv`] (or by hand in the same format).
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: u64, reason: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "missing header".into())),
    };
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "task_id" || cols[1] != "label" {
        return Err(parse_err(1, "header must start with task_id,label,f1".into()));
    }
    let has_soft = cols.last() == Some(&"soft_label");
    let feature_cols = &cols[2..cols.len() - usize::from(has_soft)];
    for (i, c) in feature_cols.iter().enumerate() {
        if *c != format!("f{}", i + 1) {
            return Err(parse_err(1, format!("expected column f{}, found {c:?}", i + 1)));
        }
    }
    let d_raw = feature_cols.len();
    if d_raw == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let width = cols.len();

    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", rec.len())));
        }
        let num = |i: usize| -> Result<f32, DataError> {
            let cell = &rec[i];
            cell.parse::<f32>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("column {}: {cell:?} is not a finite number", cols[i])))
        };
        let task_cell = &rec[0];
        let task_id = match task_cell.parse::<i64>() {
            Ok(v) if v < 0 => return Err(parse_err(line, format!("negative task_id {v}"))),
            Ok(v) => v as usize,
            Err(_) => return Err(parse_err(line, format!("task_id {task_cell:?} is not an integer"))),
        };
        let label = num(1)?;
        if !(0.0..=1.0).contains(&label) {
            return Err(parse_err(line, format!("label {label} is outside [0, 1]")));
        }
        let features = (2..2 + d_raw).map(num).collect::<Result<Vec<_>, _>>()?;
        let soft_label = if has_soft {
            let s = num(width - 1)?;
            if !(0.0..=1.0).contains(&s) {
                return Err(parse_err(line, format!("soft_label {s} is outside [0, 1]")));
            }
            Some(s)
        } else {
            None
        };
        rows.push(Example {
            task_id,
            label,
            features,
            soft_label,
        });
    }
    Ok(Dataset { d_raw, rows })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub trained_task_ids: Vec<usize>,
    pub unseen_task_ids: Vec<usize>,
    pub files: Vec<ManifestFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestFile {
    pub split: Split,
    pub path: String,
    pub rows: usize,
}

/// Writes `train.csv`, `calibration.csv`, `test.csv` and `manifest.json`
/// into `dir`.
pub fn write_split_data(dir: &Path, data: &SplitData, spec: &SyntheticSpec) -> Result<Manifest, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut files = Vec::new();
    for split in Split::ALL {
        let ds = data.get(split);
        write_csv(&dir.join(split.file_name()), ds)?;
        files.push(ManifestFile {
            split,
            path: split.file_name().into(),
            rows: ds.len(),
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        seed: spec.seed,
        trained_task_ids: (1..=spec.n_tasks).collect(),
        unseen_task_ids: data.unseen_task_ids.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    let mut f = File::create(&path).map_err(|e| DataError::io(&path, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    f.write_all(json.as_bytes()).map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path,
        line: e.line() as u64,
        reason: e.to_string(),
    })
}

/// One epoch's grouping of example indices into task blocks of length `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBlockBatch {
    pub block_len: usize,
    pub epoch_seed: u64,
    pub blocks: Vec<Vec<usize>>,
    /// Examples left over after the last full block.
    pub dropped: Vec<usize>,
}

impl TaskBlockBatch {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Shuffles all `n` examples under `epoch_seed`, cuts them into consecutive
/// blocks of `t`, and drops the remainder.
pub fn make_blocks(n: usize, t: usize, epoch_seed: u64) -> Result<TaskBlockBatch, DataError> {
    if n == 0 {
        return Err(DataError::EmptySplit);
    }
    if t == 0 {
        return Err(DataError::invalid("block_len", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    let full = n / t * t;
    let dropped = order[full..].to_vec();
    let blocks = order[..full].chunks_exact(t).map(<[usize]>::to_vec).collect();
    Ok(TaskBlockBatch {
        block_len: t,
        epoch_seed,
        blocks,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_tasks: 3,
            d_raw: 4,
            task_rows: vec![50, 40, 30, 20],
            unseen_tasks: 1,
            seed: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn default_spec_shape() {
        let spec = SyntheticSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.total_tasks(), 11);
        assert_eq!(spec.unseen_task_ids(), vec![10, 11]);
    }

    #[test]
    fn validation_names_fields() {
        let spec = SyntheticSpec { noise: 0.5, ..small_spec() };
        assert!(spec.validate().unwrap_err().to_string().contains("noise"));
        let spec = SyntheticSpec { task_rows: vec![1, 2], ..small_spec() };
        assert!(spec.validate().unwrap_err().to_string().contains("task_rows"));
        let spec = SyntheticSpec { conflict_pairs: vec![(1, 1)], ..small_spec() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unseen_rows_only_in_test() {
        let data = generate_synthetic(&small_spec()).unwrap();
        assert!(data.train.rows.iter().all(|r| r.task_id <= 3));
        assert!(data.calibration.rows.iter().all(|r| r.task_id <= 3));
        assert_eq!(data.test.indices_of(4).len(), 20);
        assert_eq!(data.train.len() + data.calibration.len() + data.test.len(), 140);
    }

    #[test]
    fn shared_rule_without_noise_is_task_blind_separable() {
        let spec = SyntheticSpec {
            n_tasks: 4,
            task_rows: vec![300; 4],
            unseen_tasks: 0,
            alpha: 1.0,
            beta: 0.0,
            noise: 0.0,
            train_frac: 1.0,
            calibration_frac: 0.0,
            ..small_spec()
        };
        let w = spec.task_weights();
        let data = generate_synthetic(&spec).unwrap();
        let correct = data
            .train
            .rows
            .iter()
            .filter(|r| {
                let m: f64 = r.features.iter().zip(&w[0]).map(|(&x, wi)| f64::from(x) * wi).sum();
                (m > 0.0) == (r.label == 1.0)
            })
            .count();
        assert_eq!(correct, data.train.len());
    }

    #[test]
    fn conflict_pair_defeats_task_blind_predictors() {
        let spec = SyntheticSpec {
            n_tasks: 2,
            d_raw: 6,
            task_rows: vec![5000, 5000],
            unseen_tasks: 0,
            noise: 0.0,
            conflict_pairs: vec![(1, 2)],
            train_frac: 1.0,
            calibration_frac: 0.0,
            seed: 17,
            ..SyntheticSpec::default()
        };
        let w = spec.task_weights();
        let data = generate_synthetic(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe = unit_vector(6, &mut rng);
        let predictors: Vec<Box<dyn Fn(&[f32]) -> bool>> = vec![
            Box::new(|x| x.iter().zip(&w[0]).map(|(&a, b)| f64::from(a) * b).sum::<f64>() > 0.0),
            Box::new(|x| x.iter().zip(&w[1]).map(|(&a, b)| f64::from(a) * b).sum::<f64>() > 0.0),
            Box::new(|x| x.iter().zip(&probe).map(|(&a, b)| f64::from(a) * b).sum::<f64>() > 0.0),
            Box::new(|_| true),
        ];
        for p in &predictors {
            let acc = data
                .train
                .rows
                .iter()
                .filter(|r| p(&r.features) == (r.label == 1.0))
                .count() as f64
                / data.train.len() as f64;
            assert!(acc <= 0.5 + 0.02, "pooled accuracy {acc}");
        }
    }

    #[test]
    fn soft_labels_match_noise_model() {
        let spec = SyntheticSpec { noise: 0.2, ..small_spec() };
        let data = generate_synthetic(&spec).unwrap();
        for r in &data.train.rows {
            let s = r.soft_label.unwrap();
            assert!(s == 0.8 || s == 0.2);
        }
        let agree = data
            .train
            .rows
            .iter()
            .filter(|r| (r.soft_label.unwrap() > 0.5) == (r.label == 1.0))
            .count() as f64
            / data.train.len() as f64;
        assert!(agree > 0.65 && agree < 0.95);
    }

    #[test]
    fn csv_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        write_split_data(&dir.path().join("a"), &a, &spec).unwrap();
        write_split_data(&dir.path().join("b"), &b, &spec).unwrap();
        for split in Split::ALL {
            let fa = std::fs::read(dir.path().join("a").join(split.file_name())).unwrap();
            let fb = std::fs::read(dir.path().join("b").join(split.file_name())).unwrap();
            assert_eq!(fa, fb);
            let loaded = load_csv(&dir.path().join("a").join(split.file_name())).unwrap();
            assert_eq!(&loaded, a.get(split));
        }
        let m = read_manifest(&dir.path().join("a")).unwrap();
        assert_eq!(m.unseen_task_ids, vec![4]);
        assert_eq!(m.spec, spec);
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn csv_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(dir.path(), "ok.csv", "task_id,label,f1,f2\n1,0,0.5,1\n2,1,-1,2e-3\n0,1,3,4\n");
        let ds = load_csv(&ok).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.d_raw, 2);
        assert!(!ds.has_soft_labels());

        let mut text = String::from("task_id,label,f1\n");
        for _ in 0..5 {
            text.push_str("1,0,0.1\n");
        }
        text.push_str("1,1.5,0.1\n");
        let bad = write(dir.path(), "bad.csv", &text);
        let err = load_csv(&bad).unwrap_err().to_string();
        assert!(err.contains("line 7"), "{err}");

        let ragged = write(dir.path(), "ragged.csv", "task_id,label,f1\n1,0,0.1,9\n");
        assert!(load_csv(&ragged).unwrap_err().to_string().contains("line 2"));
        let nan = write(dir.path(), "nan.csv", "task_id,label,f1\n1,0,abc\n");
        assert!(load_csv(&nan).unwrap_err().to_string().contains("line 2"));
        let neg = write(dir.path(), "neg.csv", "task_id,label,f1\n-1,0,1\n");
        assert!(load_csv(&neg).unwrap_err().to_string().contains("negative"));

        let soft = write(dir.path(), "soft.csv", "task_id,label,f1,soft_label\n1,1,0.3,0.9\n");
        let ds = load_csv(&soft).unwrap();
        assert_eq!(ds.rows[0].soft_label, Some(0.9));
    }

    #[test]
    fn block_examples() {
        let b = make_blocks(10, 4, 1).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.dropped.len(), 2);
        let b = make_blocks(10, 1, 1).unwrap();
        assert_eq!(b.len(), 10);
        let mut seen: Vec<usize> = b.blocks.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(make_blocks(0, 4, 1).is_err());
        assert!(make_blocks(5, 0, 1).is_err());
        assert_eq!(make_blocks(37, 4, 9).unwrap(), make_blocks(37, 4, 9).unwrap());
    }

    #[test]
    fn epoch_reshuffles_cover_all_examples() {
        let n = 103;
        let mut covered = vec![false; n];
        for epoch in 0..20 {
            for i in make_blocks(n, 8, epoch).unwrap().blocks.iter().flatten() {
                covered[*i] = true;
            }
        }
        let frac = covered.iter().filter(|&&c| c).count() as f64 / n as f64;
        assert!(frac >= 0.99, "coverage {frac}");
    }

    /// Probability that a block of `t` drawn without replacement from a pool
    /// with the given per-task counts contains a single task.
    fn pure_block_probability(counts: &[usize], t: usize) -> f64 {
        let n: usize = counts.iter().sum();
        let choose = |a: usize, k: usize| -> f64 {
            if k > a {
                return 0.0;
            }
            (0..k).map(|i| (a - i) as f64 / (k - i) as f64).product()
        };
        counts.iter().map(|&c| choose(c, t)).sum::<f64>() / choose(n, t)
    }

    #[test]
    fn mixed_block_fraction_matches_prediction() {
        let counts = [240usize, 120, 40];
        let task_of: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
        let t = 4;
        let epochs = 1000;
        let mut mixed = 0usize;
        let mut total = 0usize;
        for e in 0..epochs {
            for block in make_blocks(task_of.len(), t, 1_000 + e).unwrap().blocks {
                total += 1;
                if block.iter().any(|&i| task_of[i] != task_of[block[0]]) {
                    mixed += 1;
                }
            }
        }
        let p = 1.0 - pure_block_probability(&counts, t);
        let observed = mixed as f64 / total as f64;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        assert!((observed - p).abs() <= 3.0 * sigma, "observed {observed}, expected {p} ± {sigma}");
    }
}
