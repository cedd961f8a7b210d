//! Drift regularizers: the anisotropic feature-matrix penalty plus the three
//! swap-in baselines used by the regularizer ablation (feature distillation,
//! diagonal empirical Fisher over parameters, knowledge distillation).
//!
//! All penalties return `(loss, gradient)` pairs; gradients flow only into
//! the current model, never into frozen snapshots.

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;
use crate::model::{
    backward, forward, log_sum_exp, softmax_rows, ClassifierHead, FeatureExtractor, ModelSnapshot,
    ParamGrads,
};

/// Which penalty the backbone phase applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerKind {
    Efm,
    Fd,
    Efim,
    Kd,
    None,
}

impl std::str::FromStr for RegularizerKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "efm" => Ok(RegularizerKind::Efm),
            "fd" => Ok(RegularizerKind::Fd),
            "efim" => Ok(RegularizerKind::Efim),
            "kd" => Ok(RegularizerKind::Kd),
            "none" => Ok(RegularizerKind::None),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown regularizer '{other}' (expected efm|fd|efim|kd|none)"
            ))),
        }
    }
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RegularizerKind::Efm => "efm",
            RegularizerKind::Fd => "fd",
            RegularizerKind::Efim => "efim",
            RegularizerKind::Kd => "kd",
            RegularizerKind::None => "none",
        };
        write!(f, "{s}")
    }
}

/// Strengths for every regularizer plus the damping term.
///
/// `lambda_efm` and `eta` default to 10 and 0.1; the swap-in baselines use
/// the strengths that won their own validation sweeps (1e5 for the parameter
/// Fisher, 50 for distillation at temperature 2, 1 for feature distillation).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RegularizerConfig {
    pub lambda_efm: f64,
    /// Damping added to the feature-matrix metric: `lambda * E + eta * I`.
    pub eta: f64,
    pub lambda_fd: f64,
    /// Squared-norm variant of feature distillation (the `lambda = 0` limit
    /// of the feature-matrix penalty); the unsquared batch-sum norm is the
    /// default ablation form.
    pub fd_squared: bool,
    pub lambda_efim: f64,
    pub lambda_kd: f64,
    pub kd_temperature: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda_efm: 10.0,
            eta: 0.1,
            lambda_fd: 1.0,
            fd_squared: false,
            lambda_efim: 100_000.0,
            lambda_kd: 50.0,
            kd_temperature: 2.0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_efm", self.lambda_efm),
            ("eta", self.eta),
            ("lambda_fd", self.lambda_fd),
            ("lambda_efim", self.lambda_efim),
            ("lambda_kd", self.lambda_kd),
            ("kd_temperature", self.kd_temperature),
        ];
        for (name, v) in fields {
            if v < 0.0 || !v.is_finite() {
                return Err(CoreError::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// The penalty stays anisotropic only while `lambda * nu > eta` for the
    /// above-noise eigenvalues `nu`; below that it degenerates into feature
    /// distillation. Returns false (and warns) when the constraint fails.
    pub fn check_plasticity_constraint(&self, nu_max: f64) -> bool {
        let ok = self.lambda_efm * nu_max > self.eta;
        if !ok {
            log::warn!(
                "feature-matrix regularizer is isotropic: lambda*nu_max = {:.3e} <= eta = {:.3e}",
                self.lambda_efm * nu_max,
                self.eta
            );
        }
        ok
    }
}

/// Anisotropic feature-drift penalty.
///
/// With per-sample drift `delta = current - previous` and metric
/// `M = lambda * E_prev + eta * I`, the loss is the batch mean of
/// `delta^T M delta`; the gradient with respect to the current features is
/// `2 M delta / batch`.
pub fn efm_penalty(
    current: &Matrix,
    previous: &Matrix,
    e_prev: &Matrix,
    cfg: &RegularizerConfig,
) -> Result<(f64, Matrix)> {
    if current.rows() != previous.rows() || current.cols() != previous.cols() {
        return Err(CoreError::Dimension(format!(
            "feature batches differ: {}x{} vs {}x{}",
            current.rows(),
            current.cols(),
            previous.rows(),
            previous.cols()
        )));
    }
    let n = current.cols();
    if e_prev.rows() != n || e_prev.cols() != n {
        return Err(CoreError::Dimension(format!(
            "feature matrix is {}x{}, features have width {n}",
            e_prev.rows(),
            e_prev.cols()
        )));
    }
    let batch = current.rows().max(1) as f64;
    let mut metric = e_prev.clone();
    metric.scale_mut(cfg.lambda_efm);
    for i in 0..n {
        metric.set(i, i, metric.get(i, i) + cfg.eta);
    }

    let mut loss = 0.0;
    let mut dfeatures = Matrix::zeros(current.rows(), n);
    let mut delta = vec![0.0; n];
    for r in 0..current.rows() {
        for ((d, &c), &p) in delta.iter_mut().zip(current.row(r)).zip(previous.row(r)) {
            *d = c - p;
        }
        let md = metric.matvec(&delta);
        let q: f64 = delta.iter().zip(&md).map(|(d, m)| d * m).sum();
        loss += q;
        let out = dfeatures.row_mut(r);
        for (o, m) in out.iter_mut().zip(&md) {
            *o = 2.0 * m / batch;
        }
    }
    Ok((loss / batch, dfeatures))
}

/// Feature distillation. The default form is the batch sum of unsquared
/// feature-drift norms; the squared form is the batch mean of squared norms,
/// matching the damping-only limit of [`efm_penalty`].
pub fn fd_penalty(
    current: &Matrix,
    previous: &Matrix,
    lambda_fd: f64,
    squared: bool,
) -> Result<(f64, Matrix)> {
    if current.rows() != previous.rows() || current.cols() != previous.cols() {
        return Err(CoreError::Dimension("feature batches differ in shape".into()));
    }
    let rows = current.rows();
    let cols = current.cols();
    let mut loss = 0.0;
    let mut dfeatures = Matrix::zeros(rows, cols);
    if squared {
        let batch = rows.max(1) as f64;
        for r in 0..rows {
            let mut sq = 0.0;
            let out = dfeatures.row_mut(r);
            for ((o, &c), &p) in out.iter_mut().zip(current.row(r)).zip(previous.row(r)) {
                let d = c - p;
                sq += d * d;
                *o = lambda_fd * 2.0 * d / batch;
            }
            loss += sq;
        }
        loss = lambda_fd * loss / batch;
    } else {
        for r in 0..rows {
            let mut sq = 0.0;
            for (&c, &p) in current.row(r).iter().zip(previous.row(r)) {
                let d = c - p;
                sq += d * d;
            }
            let norm = sq.sqrt();
            loss += norm;
            if norm > 0.0 {
                let out = dfeatures.row_mut(r);
                for ((o, &c), &p) in out.iter_mut().zip(current.row(r)).zip(previous.row(r)) {
                    *o = lambda_fd * (c - p) / norm;
                }
            }
        }
        loss *= lambda_fd;
    }
    Ok((loss, dfeatures))
}

/// Diagonal empirical Fisher over backbone parameters, with the anchor
/// parameters it was estimated at.
///
/// The head grows across tasks and is not anchored; importances cover the
/// shared feature extractor only.
#[derive(Debug, Clone)]
pub struct DiagonalEfim {
    pub importances: ParamGrads,
    pub anchor: ModelSnapshot,
}

/// Estimates per-parameter importances as the dataset mean, over labels
/// drawn from the model's own distribution (taken exactly, not sampled), of
/// squared log-likelihood gradients.
pub fn diag_efim_estimate(
    extractor: &FeatureExtractor,
    head: &ClassifierHead,
    inputs: &Matrix,
) -> Result<DiagonalEfim> {
    if inputs.rows() == 0 {
        return Err(CoreError::EmptyDataset);
    }
    let m = head.num_classes();
    let mut acc = ParamGrads::zeros_like(extractor);
    let count = inputs.rows();
    for r in 0..count {
        let row = Matrix::from_fn(1, inputs.cols(), |_, c| inputs.get(r, c));
        let cache = forward(extractor, head, &row)?;
        let probs = softmax_rows(&cache.logits);
        let p = probs.row(0);
        for y in 0..m {
            if p[y] == 0.0 {
                continue;
            }
            // d log p_y / d logits = e_y - p
            let mut dlogits = Matrix::zeros(1, m);
            for (j, slot) in dlogits.row_mut(0).iter_mut().enumerate() {
                *slot = (if j == y { 1.0 } else { 0.0 }) - p[j];
            }
            let dfeat = dlogits.matmul(&head.weights.transpose());
            let g = backward(extractor, &cache.backbone, &dfeat)?;
            for ((aw, ab), (gw, gb)) in acc.layers.iter_mut().zip(&g.layers) {
                for (a, &v) in aw.data_mut().iter_mut().zip(gw.data()) {
                    *a += p[y] * v * v;
                }
                for (a, &v) in ab.iter_mut().zip(gb) {
                    *a += p[y] * v * v;
                }
            }
        }
    }
    let scale = 1.0 / count as f64;
    for (w, b) in acc.layers.iter_mut() {
        w.scale_mut(scale);
        for v in b.iter_mut() {
            *v *= scale;
        }
    }
    Ok(DiagonalEfim { importances: acc, anchor: extractor.snapshot() })
}

/// Quadratic parameter anchor: `lambda * sum_i F_i (theta_i - theta*_i)^2`,
/// gradient `2 lambda F_i (theta_i - theta*_i)`.
pub fn ewc_penalty(
    extractor: &FeatureExtractor,
    anchor: &DiagonalEfim,
    lambda_efim: f64,
) -> Result<(f64, ParamGrads)> {
    let current = extractor.param_slices();
    let reference = anchor.anchor.extractor().param_slices();
    let importance = anchor.importances.slices();
    if current.len() != reference.len()
        || current
            .iter()
            .zip(&reference)
            .any(|(c, r)| c.len() != r.len())
    {
        return Err(CoreError::Dimension("anchor shapes do not match model".into()));
    }
    let mut loss = 0.0;
    let mut grads = ParamGrads::zeros_like(extractor);
    for (t, ((cur, refp), imp)) in current.iter().zip(&reference).zip(&importance).enumerate() {
        let (gw, gb) = &mut grads.layers[t / 2];
        let out: &mut [f64] = if t % 2 == 0 { gw.data_mut() } else { gb.as_mut_slice() };
        for i in 0..cur.len() {
            let diff = cur[i] - refp[i];
            loss += imp[i] * diff * diff;
            out[i] = 2.0 * lambda_efim * imp[i] * diff;
        }
    }
    Ok((lambda_efim * loss, grads))
}

/// Knowledge distillation over the old-task logit columns.
///
/// Temperature-softened cross-entropy between the previous model's
/// distribution `q` and the current one `s`; the loss is the batch mean of
/// `-sum_j q_j log s_j` and the gradient on the current logits is
/// `lambda (s - q) / (batch * T)`.
pub fn kd_penalty(
    current_old_logits: &Matrix,
    previous_logits: &Matrix,
    temperature: f64,
    lambda_kd: f64,
) -> Result<(f64, Matrix)> {
    if current_old_logits.rows() != previous_logits.rows()
        || current_old_logits.cols() != previous_logits.cols()
    {
        return Err(CoreError::Dimension("logit batches differ in shape".into()));
    }
    if current_old_logits.cols() == 0 {
        return Ok((0.0, Matrix::zeros(current_old_logits.rows(), 0)));
    }
    let batch = current_old_logits.rows().max(1) as f64;
    let t = temperature;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(current_old_logits.rows(), current_old_logits.cols());
    for r in 0..current_old_logits.rows() {
        let cur: Vec<f64> = current_old_logits.row(r).iter().map(|z| z / t).collect();
        let prev: Vec<f64> = previous_logits.row(r).iter().map(|z| z / t).collect();
        let lse_cur = log_sum_exp(&cur);
        let lse_prev = log_sum_exp(&prev);
        let out = dlogits.row_mut(r);
        for j in 0..cur.len() {
            let q = (prev[j] - lse_prev).exp();
            let log_s = cur[j] - lse_cur;
            loss -= q * log_s;
            out[j] = lambda_kd * (log_s.exp() - q) / (batch * t);
        }
    }
    Ok((lambda_kd * loss / batch, dlogits))
}
