//! Task streams: warm/cold split construction, synthetic Gaussian class
//! streams, and CSV ingestion.
//!
//! Streams are immutable once built. Train data is handed to the trainer one
//! task at a time and consumed; test splits stay with the evaluation harness.
//! An optional access probe records every read of a task's train data so the
//! exemplar-free contract (no past-task train reads) can be property-tested.

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;
use crate::seeded_rng;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::{Arc, Mutex};

/// Warm start puts a large first task at index 0; cold start begins directly
/// with the incremental steps at index 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    Warm,
    Cold,
}

impl std::str::FromStr for StartMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warm" => Ok(StartMode::Warm),
            "cold" => Ok(StartMode::Cold),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown mode '{other}' (expected warm|cold)"
            ))),
        }
    }
}

/// How the class set is distributed over tasks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub total_classes: usize,
    /// Classes in the warm-start pre-training task; must be 0 in cold start.
    pub first_task_classes: usize,
    pub per_step_classes: usize,
    /// Number of incremental steps (excluding the warm first task).
    pub num_steps: usize,
    pub mode: StartMode,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mode == StartMode::Cold && self.first_task_classes != 0 {
            return Err(CoreError::InvalidSplit(
                "cold start requires first_task_classes = 0".into(),
            ));
        }
        if self.mode == StartMode::Warm && self.first_task_classes == 0 {
            return Err(CoreError::InvalidSplit(
                "warm start requires first_task_classes > 0".into(),
            ));
        }
        if self.num_steps == 0 || self.per_step_classes == 0 {
            return Err(CoreError::InvalidSplit("need at least one step with classes".into()));
        }
        let covered = self.first_task_classes + self.num_steps * self.per_step_classes;
        if covered != self.total_classes {
            return Err(CoreError::InvalidSplit(format!(
                "{} + {} * {} = {covered} does not cover {} classes",
                self.first_task_classes, self.num_steps, self.per_step_classes, self.total_classes
            )));
        }
        Ok(())
    }

    /// Task id of the first task: 0 in warm start, 1 in cold start.
    pub fn start_index(&self) -> usize {
        match self.mode {
            StartMode::Warm => 0,
            StartMode::Cold => 1,
        }
    }

    pub fn num_tasks(&self) -> usize {
        match self.mode {
            StartMode::Warm => self.num_steps + 1,
            StartMode::Cold => self.num_steps,
        }
    }
}

/// Ordered class-id lists per task, tagged with the starting task id.
#[derive(Debug, Clone)]
pub struct TaskSplits {
    pub lists: Vec<Vec<usize>>,
    pub start_index: usize,
}

impl TaskSplits {
    /// Task id of the split at position `pos`.
    pub fn task_id(&self, pos: usize) -> usize {
        self.start_index + pos
    }
}

/// Partitions a shuffled class permutation into per-task lists.
///
/// Seed 0 is the identity convention: classes stay in natural order. Any
/// other seed applies a seeded Fisher-Yates shuffle first.
pub fn build_splits(spec: &SplitSpec, class_shuffle_seed: u64) -> Result<TaskSplits> {
    spec.validate()?;
    let mut classes: Vec<usize> = (0..spec.total_classes).collect();
    if class_shuffle_seed != 0 {
        let mut rng = seeded_rng(class_shuffle_seed, "class-shuffle");
        classes.shuffle(&mut rng);
    }
    let mut lists = Vec::with_capacity(spec.num_tasks());
    let mut cursor = 0;
    if spec.mode == StartMode::Warm {
        lists.push(classes[..spec.first_task_classes].to_vec());
        cursor = spec.first_task_classes;
    }
    for _ in 0..spec.num_steps {
        lists.push(classes[cursor..cursor + spec.per_step_classes].to_vec());
        cursor += spec.per_step_classes;
    }
    Ok(TaskSplits { lists, start_index: spec.start_index() })
}

/// Event log for the exemplar-free property test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessEvent {
    /// Train data of this task was read.
    Read { task_id: usize },
    /// The task finished training (boundary marker pushed by the harness).
    Completed { task_id: usize },
}

pub type AccessLog = Arc<Mutex<Vec<AccessEvent>>>;

pub fn new_access_log() -> AccessLog {
    Arc::new(Mutex::new(Vec::new()))
}

/// Train split of one task. Reads go through accessors so an attached probe
/// can witness them; the trainer consumes this by value and drops it when
/// the task completes.
#[derive(Debug, Clone)]
pub struct TaskTrainData {
    task_id: usize,
    class_ids: Vec<usize>,
    inputs: Matrix,
    labels: Vec<usize>,
    probe: Option<AccessLog>,
}

impl TaskTrainData {
    pub fn new(task_id: usize, class_ids: Vec<usize>, inputs: Matrix, labels: Vec<usize>) -> Self {
        TaskTrainData { task_id, class_ids, inputs, labels, probe: None }
    }

    pub fn attach_probe(&mut self, log: AccessLog) {
        self.probe = Some(log);
    }

    fn record(&self) {
        if let Some(p) = &self.probe {
            p.lock().unwrap().push(AccessEvent::Read { task_id: self.task_id });
        }
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn num_samples(&self) -> usize {
        self.inputs.rows()
    }

    pub fn inputs(&self) -> &Matrix {
        self.record();
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        self.record();
        &self.labels
    }
}

/// Held-out test split, retained by the evaluation harness across tasks.
#[derive(Debug, Clone)]
pub struct TaskTestData {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

/// A full class-incremental stream: disjoint class sets, train and test
/// split per task.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub train: Vec<TaskTrainData>,
    pub test: Vec<TaskTestData>,
    pub start_index: usize,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.train.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train.first().map(|t| t.inputs.cols()).unwrap_or(0)
    }

    pub fn into_parts(self) -> (Vec<TaskTrainData>, Vec<TaskTestData>) {
        (self.train, self.test)
    }

    pub fn attach_probe(&mut self, log: AccessLog) {
        for t in &mut self.train {
            t.attach_probe(log.clone());
        }
    }
}

/// Synthetic Gaussian class stream.
///
/// Each class is an isotropic Gaussian cluster; cluster means are drawn from
/// `N(0, mean_variance * I)`, samples from `N(mean, within_variance * I)`.
/// Per-class data depends only on `(seed, class id)`, never on the split
/// permutation. `rotation_per_task` applies an input-space rotation that
/// grows with the task position, inducing covariate shift across tasks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticStreamSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub mean_variance: f64,
    pub within_variance: f64,
    /// Rotation angle in radians applied `position` times to task inputs.
    pub rotation_per_task: f64,
    pub seed: u64,
}

impl Default for SyntheticStreamSpec {
    fn default() -> Self {
        SyntheticStreamSpec {
            classes: 50,
            input_dim: 64,
            train_per_class: 200,
            test_per_class: 100,
            mean_variance: 4.0,
            within_variance: 1.0,
            rotation_per_task: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticStreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.input_dim == 0 {
            return Err(CoreError::InvalidConfig("classes and input_dim must be positive".into()));
        }
        if self.train_per_class < 2 {
            return Err(CoreError::InvalidConfig(
                "train_per_class must be at least 2 (class statistics need it)".into(),
            ));
        }
        if self.mean_variance < 0.0 || self.within_variance < 0.0 {
            return Err(CoreError::InvalidConfig("variances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Applies `count` block-plane rotations of `angle` radians in place.
fn rotate_rows(m: &mut Matrix, angle: f64, count: usize) {
    if angle == 0.0 || count == 0 {
        return;
    }
    let theta = angle * count as f64;
    let (c, s) = (theta.cos(), theta.sin());
    let dim = m.cols();
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let mut i = 0;
        while i + 1 < dim {
            let (a, b) = (row[i], row[i + 1]);
            row[i] = c * a - s * b;
            row[i + 1] = s * a + c * b;
            i += 2;
        }
    }
}

/// Per-feature standardization fit on this task's train data only, applied
/// to both splits. Features with (near) zero spread are left unscaled.
fn standardize(train: &mut Matrix, test: &mut Matrix) {
    let dim = train.cols();
    let count = train.rows() as f64;
    let mut mean = vec![0.0; dim];
    for r in 0..train.rows() {
        for (m, v) in mean.iter_mut().zip(train.row(r)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut std = vec![0.0; dim];
    for r in 0..train.rows() {
        for ((s, v), m) in std.iter_mut().zip(train.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / count).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    for m_ in [train, test] {
        for r in 0..m_.rows() {
            for ((v, mu), sd) in m_.row_mut(r).iter_mut().zip(&mean).zip(&std) {
                *v = (*v - mu) / sd;
            }
        }
    }
}

/// Builds a synthetic stream for the given splits. Train and test are
/// disjoint by construction and the result is a pure function of
/// `(spec, splits)`.
pub fn generate_synthetic_stream(spec: &SyntheticStreamSpec, splits: &TaskSplits) -> Result<TaskStream> {
    spec.validate()?;
    let needed: usize = splits.lists.iter().map(|l| l.len()).sum();
    if needed > spec.classes {
        return Err(CoreError::InvalidSplit(format!(
            "splits need {needed} classes, spec provides {}",
            spec.classes
        )));
    }
    let dim = spec.input_dim;
    let mean_sd = spec.mean_variance.sqrt();
    let within_sd = spec.within_variance.sqrt();

    let mut train_tasks = Vec::with_capacity(splits.lists.len());
    let mut test_tasks = Vec::with_capacity(splits.lists.len());
    for (pos, class_list) in splits.lists.iter().enumerate() {
        let task_id = splits.task_id(pos);
        let n_train = class_list.len() * spec.train_per_class;
        let n_test = class_list.len() * spec.test_per_class;
        let mut train_inputs = Matrix::zeros(n_train, dim);
        let mut test_inputs = Matrix::zeros(n_test, dim);
        let mut train_labels = Vec::with_capacity(n_train);
        let mut test_labels = Vec::with_capacity(n_test);
        let (mut tr, mut te) = (0usize, 0usize);
        for &class in class_list {
            let mut mean_rng = seeded_rng(spec.seed, &format!("class-mean-{class}"));
            let mean: Vec<f64> = (0..dim)
                .map(|_| mean_rng.sample::<f64, _>(StandardNormal) * mean_sd)
                .collect();
            let mut sample_rng = seeded_rng(spec.seed, &format!("class-samples-{class}"));
            for s in 0..spec.train_per_class + spec.test_per_class {
                let is_train = s < spec.train_per_class;
                let row = if is_train {
                    let r = train_inputs.row_mut(tr);
                    train_labels.push(class);
                    tr += 1;
                    r
                } else {
                    let r = test_inputs.row_mut(te);
                    test_labels.push(class);
                    te += 1;
                    r
                };
                for (v, m) in row.iter_mut().zip(&mean) {
                    *v = m + sample_rng.sample::<f64, _>(StandardNormal) * within_sd;
                }
            }
        }
        rotate_rows(&mut train_inputs, spec.rotation_per_task, pos);
        rotate_rows(&mut test_inputs, spec.rotation_per_task, pos);
        standardize(&mut train_inputs, &mut test_inputs);

        train_tasks.push(TaskTrainData::new(task_id, class_list.clone(), train_inputs, train_labels));
        test_tasks.push(TaskTestData {
            task_id,
            class_ids: class_list.clone(),
            inputs: test_inputs,
            labels: test_labels,
        });
    }
    Ok(TaskStream { train: train_tasks, test: test_tasks, start_index: splits.start_index })
}

/// Loads a CSV dataset (`label,f0,...,fD-1`, strict) and routes rows to
/// tasks by label. Every `test_every`-th row of each class becomes test
/// data; `test_every = 0` keeps everything in train.
pub fn load_csv_dataset(path: &Path, splits: &TaskSplits, test_every: usize) -> Result<TaskStream> {
    if !path.exists() {
        return Err(CoreError::MissingArtifact(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    {
        let headers = reader.headers()?;
        if headers.is_empty() || headers.len() < 2 {
            return Err(CoreError::Parse("CSV needs a label column and features".into()));
        }
        if &headers[0] != "label" {
            return Err(CoreError::Parse(format!(
                "first CSV column must be 'label', got '{}'",
                &headers[0]
            )));
        }
        for (i, h) in headers.iter().skip(1).enumerate() {
            let expect = format!("f{i}");
            if h != expect {
                return Err(CoreError::Parse(format!(
                    "CSV feature column {} must be '{expect}', got '{h}'",
                    i + 1
                )));
            }
        }
    }
    let width = reader.headers()?.len() - 1;

    // class id -> rows of features
    let mut by_class: std::collections::BTreeMap<usize, Vec<Vec<f64>>> =
        std::collections::BTreeMap::new();
    let known: std::collections::BTreeSet<usize> =
        splits.lists.iter().flatten().copied().collect();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != width + 1 {
            return Err(CoreError::Parse(format!(
                "row {}: expected {} fields, got {}",
                line + 2,
                width + 1,
                record.len()
            )));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| CoreError::Parse(format!("row {}: bad label '{}'", line + 2, &record[0])))?;
        if !known.contains(&label) {
            return Err(CoreError::UnknownClass(label));
        }
        let mut features = Vec::with_capacity(width);
        for i in 0..width {
            let v: f64 = record[i + 1].parse().map_err(|_| {
                CoreError::Parse(format!("row {}: bad value '{}'", line + 2, &record[i + 1]))
            })?;
            features.push(v);
        }
        by_class.entry(label).or_default().push(features);
    }
    if by_class.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    for &class in &known {
        let rows = by_class.get(&class).map(|v| v.len()).unwrap_or(0);
        if rows < 2 {
            return Err(CoreError::TooFewSamples { class, count: rows, min: 2 });
        }
    }

    let mut train_tasks = Vec::with_capacity(splits.lists.len());
    let mut test_tasks = Vec::with_capacity(splits.lists.len());
    for (pos, class_list) in splits.lists.iter().enumerate() {
        let task_id = splits.task_id(pos);
        let mut train_rows: Vec<(usize, &Vec<f64>)> = Vec::new();
        let mut test_rows: Vec<(usize, &Vec<f64>)> = Vec::new();
        for &class in class_list {
            for (i, feat) in by_class[&class].iter().enumerate() {
                if test_every > 0 && i % test_every == test_every - 1 {
                    test_rows.push((class, feat));
                } else {
                    train_rows.push((class, feat));
                }
            }
        }
        let pack = |rows: &[(usize, &Vec<f64>)]| -> (Matrix, Vec<usize>) {
            let mut m = Matrix::zeros(rows.len(), width);
            let mut labels = Vec::with_capacity(rows.len());
            for (r, (class, feat)) in rows.iter().enumerate() {
                m.row_mut(r).copy_from_slice(feat);
                labels.push(*class);
            }
            (m, labels)
        };
        let (mut train_inputs, train_labels) = pack(&train_rows);
        let (mut test_inputs, test_labels) = pack(&test_rows);
        standardize(&mut train_inputs, &mut test_inputs);
        train_tasks.push(TaskTrainData::new(task_id, class_list.clone(), train_inputs, train_labels));
        test_tasks.push(TaskTestData {
            task_id,
            class_ids: class_list.clone(),
            inputs: test_inputs,
            labels: test_labels,
        });
    }
    Ok(TaskStream { train: train_tasks, test: test_tasks, start_index: splits.start_index })
}

#[cfg(test)]
mod tests;
