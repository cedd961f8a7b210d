//! Gaussian class prototypes: per-class feature statistics, pseudo-feature
//! sampling, and drift compensation of the stored means.
//!
//! A prototype is the feature-space mean and population covariance of a
//! class, computed once in the task that introduced the class. Covariances
//! are immutable afterwards; only the means move, and only through
//! [`compensate_drift`], which estimates backbone drift from current-task
//! samples weighted by their feature-matrix distance to the prototype.

use crate::error::{CoreError, Result};
use crate::linalg::{quadratic_form, sample_gaussian, Matrix};
use crate::model::FeatureExtractor;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Gaussian statistics of one class in feature space.
#[derive(Debug, Clone)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub origin_task: usize,
    mean: Vec<f64>,
    covariance: Matrix,
}

impl ClassPrototype {
    pub fn new(class_id: usize, origin_task: usize, mean: Vec<f64>, covariance: Matrix) -> Self {
        ClassPrototype { class_id, origin_task, mean, covariance }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Fixed after creation; drift compensation moves only the mean.
    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Full or diagonal-only covariance storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceMode {
    Full,
    Diagonal,
}

impl std::str::FromStr for CovarianceMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CovarianceMode::Full),
            "diag" | "diagonal" => Ok(CovarianceMode::Diagonal),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown covariance mode '{other}' (expected full|diag)"
            ))),
        }
    }
}

/// All prototypes accumulated so far, keyed by class id.
#[derive(Debug, Clone, Default)]
pub struct PrototypeStore {
    classes: BTreeMap<usize, ClassPrototype>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        PrototypeStore::default()
    }

    pub fn insert(&mut self, proto: ClassPrototype) -> Result<()> {
        if self.classes.contains_key(&proto.class_id) {
            return Err(CoreError::InvalidConfig(format!(
                "class {} already has a prototype",
                proto.class_id
            )));
        }
        self.classes.insert(proto.class_id, proto);
        Ok(())
    }

    pub fn get(&self, class_id: usize) -> Option<&ClassPrototype> {
        self.classes.get(&class_id)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.classes.values()
    }

    fn shift_mean(&mut self, class_id: usize, shift: &[f64]) {
        if let Some(p) = self.classes.get_mut(&class_id) {
            for (m, s) in p.mean.iter_mut().zip(shift) {
                *m += s;
            }
        }
    }

    /// Serializes as a JSON index plus one binary matrix dump pair
    /// (mean, covariance) per class.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = Vec::new();
        for p in self.classes.values() {
            let mean_file = format!("class_{:05}.mean.efmm", p.class_id);
            let cov_file = format!("class_{:05}.cov.efmm", p.class_id);
            let mean_m = Matrix::from_vec(1, p.mean.len(), p.mean.clone())?;
            crate::linalg::save_matrix(&dir.join(&mean_file), &mean_m)?;
            crate::linalg::save_matrix(&dir.join(&cov_file), &p.covariance)?;
            index.push(serde_json::json!({
                "class_id": p.class_id,
                "origin_task": p.origin_task,
                "dim": p.mean.len(),
                "mean_file": mean_file,
                "cov_file": cov_file,
            }));
        }
        let f = BufWriter::new(fs::File::create(dir.join("index.json"))?);
        serde_json::to_writer_pretty(f, &serde_json::json!({ "classes": index }))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        if !index_path.exists() {
            return Err(CoreError::MissingArtifact(index_path));
        }
        let f = BufReader::new(fs::File::open(&index_path)?);
        let index: serde_json::Value = serde_json::from_reader(f)?;
        let mut store = PrototypeStore::new();
        let entries = index["classes"]
            .as_array()
            .ok_or_else(|| CoreError::Parse("prototype index lacks 'classes' array".into()))?;
        for e in entries {
            let class_id = e["class_id"].as_u64().ok_or_else(|| {
                CoreError::Parse("prototype index entry lacks class_id".into())
            })? as usize;
            let origin_task = e["origin_task"].as_u64().unwrap_or(0) as usize;
            let mean_file = e["mean_file"]
                .as_str()
                .ok_or_else(|| CoreError::Parse("prototype index entry lacks mean_file".into()))?;
            let cov_file = e["cov_file"]
                .as_str()
                .ok_or_else(|| CoreError::Parse("prototype index entry lacks cov_file".into()))?;
            let mean = crate::linalg::load_matrix(&dir.join(mean_file))?;
            let cov = crate::linalg::load_matrix(&dir.join(cov_file))?;
            store.insert(ClassPrototype::new(
                class_id,
                origin_task,
                mean.data().to_vec(),
                cov,
            ))?;
        }
        Ok(store)
    }
}

/// Per-class feature mean and population covariance under the current
/// backbone. Every requested class needs at least two samples.
pub fn compute_class_stats(
    extractor: &FeatureExtractor,
    inputs: &Matrix,
    labels: &[usize],
    class_ids: &[usize],
    origin_task: usize,
    mode: CovarianceMode,
) -> Result<Vec<ClassPrototype>> {
    if inputs.rows() != labels.len() {
        return Err(CoreError::Dimension(format!(
            "{} inputs vs {} labels",
            inputs.rows(),
            labels.len()
        )));
    }
    let features = extractor.forward_features(inputs)?.features;
    let n = features.cols();
    let mut out = Vec::with_capacity(class_ids.len());
    for &class in class_ids {
        let rows: Vec<usize> = (0..inputs.rows()).filter(|&r| labels[r] == class).collect();
        if rows.len() < 2 {
            return Err(CoreError::TooFewSamples { class, count: rows.len(), min: 2 });
        }
        let count = rows.len() as f64;
        let mut mean = vec![0.0; n];
        for &r in &rows {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        let mut cov = Matrix::zeros(n, n);
        let mut centered = vec![0.0; n];
        for &r in &rows {
            for ((c, v), m) in centered.iter_mut().zip(features.row(r)).zip(&mean) {
                *c = v - m;
            }
            cov.add_outer(1.0, &centered);
        }
        cov.scale_mut(1.0 / count);
        if mode == CovarianceMode::Diagonal {
            let diag: Vec<f64> = (0..n).map(|i| cov.get(i, i)).collect();
            cov = Matrix::diag(&diag);
        }
        out.push(ClassPrototype::new(class, origin_task, mean, cov));
    }
    Ok(out)
}

/// Draws `per_class` pseudo-features from each requested class prototype.
/// Returns the stacked feature batch and the matching class labels.
pub fn sample_pseudo_features(
    store: &PrototypeStore,
    class_ids: &[usize],
    per_class: usize,
    rng: &mut crate::Rng,
) -> Result<(Matrix, Vec<usize>)> {
    if class_ids.is_empty() {
        return Ok((Matrix::zeros(0, 0), Vec::new()));
    }
    let dim = store
        .get(class_ids[0])
        .ok_or(CoreError::UnknownClass(class_ids[0]))?
        .dim();
    let mut batch = Matrix::zeros(class_ids.len() * per_class, dim);
    let mut labels = Vec::with_capacity(class_ids.len() * per_class);
    let mut row = 0;
    for &class in class_ids {
        let proto = store.get(class).ok_or(CoreError::UnknownClass(class))?;
        let samples = sample_gaussian(proto.mean(), proto.covariance(), per_class, rng)?;
        for r in 0..per_class {
            batch.row_mut(row).copy_from_slice(samples.row(r));
            labels.push(class);
            row += 1;
        }
    }
    Ok((batch, labels))
}

/// Kernel width for the drift-compensation weights.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DriftCompensationConfig {
    /// `sigma^2` in the exponent; must be positive.
    pub sigma_sq: f64,
}

impl Default for DriftCompensationConfig {
    fn default() -> Self {
        DriftCompensationConfig { sigma_sq: 0.09 }
    }
}

impl DriftCompensationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_sq <= 0.0 || !self.sigma_sq.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "drift sigma_sq must be > 0, got {}",
                self.sigma_sq
            )));
        }
        Ok(())
    }
}

/// Moves every stored prototype mean by a weighted average of the observed
/// per-sample feature drifts between the old and new backbone.
///
/// With old features `f_i`, drifts `d_i = f_new(x_i) - f_old(x_i)` and
/// weights `w_i = exp(-(f_i - p)^T E_prev (f_i - p) / (2 sigma^2))`, each
/// mean shifts by `sum w_i d_i / sum w_i`. The weights are evaluated with a
/// log-sum-exp shift so the normalization never underflows. Covariances are
/// left untouched.
pub fn compensate_drift(
    store: &mut PrototypeStore,
    e_prev: &Matrix,
    old_extractor: &FeatureExtractor,
    new_extractor: &FeatureExtractor,
    current_inputs: &Matrix,
    cfg: &DriftCompensationConfig,
) -> Result<()> {
    cfg.validate()?;
    if current_inputs.rows() == 0 {
        return Err(CoreError::EmptyDataset);
    }
    let old_features = old_extractor.forward_features(current_inputs)?.features;
    let new_features = new_extractor.forward_features(current_inputs)?.features;
    let n = old_features.cols();
    if e_prev.rows() != n || e_prev.cols() != n {
        return Err(CoreError::Dimension(format!(
            "feature matrix is {}x{}, features have width {n}",
            e_prev.rows(),
            e_prev.cols()
        )));
    }
    let count = current_inputs.rows();
    let class_ids = store.class_ids();
    let mut diff = vec![0.0; n];
    for class in class_ids {
        let proto_mean = store.get(class).expect("listed class").mean().to_vec();
        // Log-weights, shifted by their maximum before exponentiation.
        let mut exponents = Vec::with_capacity(count);
        let mut max_exp = f64::NEG_INFINITY;
        for r in 0..count {
            for ((d, f), p) in diff.iter_mut().zip(old_features.row(r)).zip(&proto_mean) {
                *d = f - p;
            }
            let q = quadratic_form(e_prev, &diff)?;
            let a = -q / (2.0 * cfg.sigma_sq);
            max_exp = max_exp.max(a);
            exponents.push(a);
        }
        let mut shift = vec![0.0; n];
        let mut norm = 0.0;
        for (r, a) in exponents.iter().enumerate() {
            let w = (a - max_exp).exp();
            norm += w;
            for ((s, fnew), fold) in shift.iter_mut().zip(new_features.row(r)).zip(old_features.row(r)) {
                *s += w * (fnew - fold);
            }
        }
        for s in shift.iter_mut() {
            *s /= norm;
        }
        store.shift_mean(class, &shift);
    }
    Ok(())
}
