//! The Empirical Feature Matrix: a PSD pseudo-metric over feature space.
//!
//! For a feature vector `f` and head `W` with softmax output `p`, the local
//! matrix is the expectation over labels `y ~ p` of the outer products of
//! the log-likelihood gradients with respect to the features. Because the
//! Jacobian of `log softmax(W^T f)` with respect to the logits is
//! `I_m - P`, with `P` the softmax row replicated `m` times, the local
//! matrix has a closed form that needs only a forward pass:
//!
//! ```text
//! E_f = E_{y~p}[ W (I_m - P)_y (W (I_m - P)_y)^T ]
//! ```
//!
//! The dataset-level matrix is the mean of the local matrices over a task's
//! samples. Its top eigenvectors span the feature directions whose
//! perturbation changes the classifier output; the orthogonal complement
//! leaves the softmax exactly invariant.

use crate::error::{CoreError, Result};
use crate::linalg::{numerical_rank, quadratic_form, sym_eig, Matrix};
use crate::model::{log_sum_exp, softmax_rows, ClassifierHead, FeatureExtractor};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Default relative tolerance when counting above-noise eigenvalues. Any
/// tolerance between 1e-6 and 1e-10 yields the same rank on a well-trained
/// model; the diagnostics assert this.
pub const DEFAULT_RANK_REL_TOL: f64 = 1e-8;

/// Dataset-level empirical feature matrix for one task.
#[derive(Debug, Clone)]
pub struct EmpiricalFeatureMatrix {
    /// `n x n`, symmetric PSD.
    pub matrix: Matrix,
    pub task_index: usize,
    /// Classes seen so far (head width when the matrix was computed).
    pub num_classes: usize,
    pub sample_count: usize,
}

/// Eigendecomposition of an EFM plus its numerical rank.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
    pub rank: usize,
}

/// Local feature matrix of a single sample, in closed form.
///
/// The expectation over `y` runs over the full label distribution, exactly,
/// rather than by sampling; with the closed form this costs one forward pass.
pub fn local_efm(features: &[f64], head: &ClassifierHead) -> Matrix {
    let n = head.feature_dim();
    let m = head.num_classes();
    debug_assert_eq!(features.len(), n);
    let logits: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| features[i] * head.weights.get(i, j)).sum())
        .collect();
    let lse = log_sum_exp(&logits);
    let p: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();

    let mut efm = Matrix::zeros(n, n);
    let mut jac_col = vec![0.0; m];
    for y in 0..m {
        if p[y] == 0.0 {
            continue;
        }
        // y-th row of the log-softmax Jacobian I_m - P, as a column vector.
        for (slot, &pj) in jac_col.iter_mut().zip(&p) {
            *slot = -pj;
        }
        jac_col[y] += 1.0;
        let v = head.weights.matvec(&jac_col);
        efm.add_outer(p[y], &v);
    }
    efm
}

/// Mean of the local matrices over every sample of a dataset, accumulated
/// with a count-weighted running mean in deterministic row order.
pub fn dataset_efm(
    extractor: &FeatureExtractor,
    head: &ClassifierHead,
    inputs: &Matrix,
    task_index: usize,
) -> Result<EmpiricalFeatureMatrix> {
    if inputs.rows() == 0 {
        return Err(CoreError::EmptyDataset);
    }
    let cache = extractor.forward_features(inputs)?;
    let n = extractor.feature_dim();
    let mut mean = Matrix::zeros(n, n);
    for r in 0..inputs.rows() {
        let local = local_efm(cache.features.row(r), head);
        let w = 1.0 / (r as f64 + 1.0);
        for (m, l) in mean.data_mut().iter_mut().zip(local.data()) {
            *m += w * (l - *m);
        }
    }
    Ok(EmpiricalFeatureMatrix {
        matrix: mean,
        task_index,
        num_classes: head.num_classes(),
        sample_count: inputs.rows(),
    })
}

/// Quadratic form `delta^T E delta` induced by an EFM.
pub fn kl_quadratic(efm: &Matrix, delta: &[f64]) -> Result<f64> {
    quadratic_form(efm, delta)
}

/// Exact `KL(p(y | f + delta) || p(y | f))` under the given head.
///
/// The EFM is the Hessian of this divergence at `delta = 0`, so the directed
/// KL expands as `0.5 * delta^T E_f delta + O(|delta|^3)` and the symmetrized
/// divergence (both directions summed) as `delta^T E_f delta + O(|delta|^3)`.
pub fn directed_kl(head: &ClassifierHead, features: &[f64], delta: &[f64]) -> f64 {
    let m = head.num_classes();
    let n = head.feature_dim();
    let shifted: Vec<f64> = features.iter().zip(delta).map(|(f, d)| f + d).collect();
    let mut base = vec![0.0; m];
    let mut pert = vec![0.0; m];
    for j in 0..m {
        for i in 0..n {
            let w = head.weights.get(i, j);
            base[j] += features[i] * w;
            pert[j] += shifted[i] * w;
        }
    }
    let lse_base = log_sum_exp(&base);
    let lse_pert = log_sum_exp(&pert);
    let mut kl = 0.0;
    for j in 0..m {
        let log_q = pert[j] - lse_pert;
        let log_p = base[j] - lse_base;
        kl += log_q.exp() * (log_q - log_p);
    }
    kl
}

/// Symmetrized divergence, for which the EFM quadratic form is the exact
/// second-order model (no 1/2 factor).
pub fn symmetric_kl(head: &ClassifierHead, features: &[f64], delta: &[f64]) -> f64 {
    let shifted: Vec<f64> = features.iter().zip(delta).map(|(f, d)| f + d).collect();
    let neg: Vec<f64> = delta.iter().map(|d| -d).collect();
    directed_kl(head, features, delta) + directed_kl(head, &shifted, &neg)
}

/// Eigendecomposition plus numerical rank of an EFM.
pub fn spectrum_analysis(efm: &EmpiricalFeatureMatrix) -> Result<Spectrum> {
    spectrum_with_tol(efm, DEFAULT_RANK_REL_TOL)
}

pub fn spectrum_with_tol(efm: &EmpiricalFeatureMatrix, rel_tol: f64) -> Result<Spectrum> {
    let eig = sym_eig(&efm.matrix)?;
    let rank = numerical_rank(&eig.eigenvalues, rel_tol);
    Ok(Spectrum { eigenvalues: eig.eigenvalues, eigenvectors: eig.eigenvectors, rank })
}

/// Which side of the spectrum a perturbation lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    /// Span of the eigenvectors with above-noise eigenvalues.
    Principal,
    /// Orthogonal complement: the numerical null space.
    NonPrincipal,
}

impl std::fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PerturbMode::Principal => write!(f, "principal"),
            PerturbMode::NonPrincipal => write!(f, "non-principal"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerturbationOptions {
    /// Per-coordinate Gaussian sigma; `None` picks
    /// `0.5 * sqrt(trace(E) / rank)`.
    pub noise_scale: Option<f64>,
    pub mode: PerturbMode,
    /// When set, each sample's perturbation is rescaled to exactly this
    /// Euclidean norm, making the two modes directly comparable.
    pub target_norm: Option<f64>,
    pub rank_rel_tol: f64,
}

impl PerturbationOptions {
    pub fn new(mode: PerturbMode) -> Self {
        PerturbationOptions {
            noise_scale: None,
            mode,
            target_norm: None,
            rank_rel_tol: DEFAULT_RANK_REL_TOL,
        }
    }
}

/// Output-deviation statistics for feature perturbations along (or
/// orthogonal to) the principal subspace of an EFM.
#[derive(Debug, Clone)]
pub struct PerturbationReport {
    pub mode: PerturbMode,
    /// Sigma actually used (after the default rule).
    pub sigma: f64,
    pub rank: usize,
    pub mean_abs_softmax_dev: f64,
    pub max_abs_softmax_dev: f64,
    pub accuracy_base: f64,
    pub accuracy_perturbed: f64,
}

/// Perturbs the features of `inputs` inside the chosen eigen-subspace of
/// `efm` and reports softmax deviation and accuracy change. `labels` are
/// class ids known to the head.
pub fn perturbation_report(
    extractor: &FeatureExtractor,
    head: &ClassifierHead,
    efm: &EmpiricalFeatureMatrix,
    inputs: &Matrix,
    labels: &[usize],
    opts: &PerturbationOptions,
    rng: &mut crate::Rng,
) -> Result<PerturbationReport> {
    if inputs.rows() == 0 {
        return Err(CoreError::EmptyDataset);
    }
    let n = extractor.feature_dim();
    let spectrum = spectrum_with_tol(efm, opts.rank_rel_tol)?;
    let k = spectrum.rank;
    let dims: std::ops::Range<usize> = match opts.mode {
        PerturbMode::Principal => {
            if k == 0 {
                return Err(CoreError::Numerical(
                    "principal perturbation undefined for a rank-0 matrix".into(),
                ));
            }
            0..k
        }
        PerturbMode::NonPrincipal => {
            if k >= n {
                return Err(CoreError::Numerical(
                    "non-principal subspace is empty (full-rank matrix)".into(),
                ));
            }
            k..n
        }
    };
    let sigma = opts
        .noise_scale
        .unwrap_or_else(|| 0.5 * (efm.matrix.trace() / k.max(1) as f64).sqrt());

    let cache = extractor.forward_features(inputs)?;
    let base_logits = head.logits(&cache.features);
    let base_probs = softmax_rows(&base_logits);

    let mut perturbed = cache.features;
    for r in 0..perturbed.rows() {
        let mut u = vec![0.0; n];
        for d in dims.clone() {
            let eps: f64 = rng.sample::<f64, _>(StandardNormal);
            let eps = eps * sigma;
            for (i, ui) in u.iter_mut().enumerate() {
                *ui += eps * spectrum.eigenvectors.get(i, d);
            }
        }
        if let Some(target) = opts.target_norm {
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                let s = target / norm;
                for v in u.iter_mut() {
                    *v *= s;
                }
            }
        }
        let row = perturbed.row_mut(r);
        for (v, d) in row.iter_mut().zip(&u) {
            *v += d;
        }
    }

    let pert_logits = head.logits(&perturbed);
    let pert_probs = softmax_rows(&pert_logits);

    let mut sum_dev = 0.0;
    let mut max_dev: f64 = 0.0;
    for (a, b) in base_probs.data().iter().zip(pert_probs.data()) {
        let d = (a - b).abs();
        sum_dev += d;
        max_dev = max_dev.max(d);
    }
    let mean_dev = sum_dev / base_probs.data().len() as f64;

    let accuracy_base = accuracy_from_logits(&base_logits, head, labels);
    let accuracy_perturbed = accuracy_from_logits(&pert_logits, head, labels);

    Ok(PerturbationReport {
        mode: opts.mode,
        sigma,
        rank: k,
        mean_abs_softmax_dev: mean_dev,
        max_abs_softmax_dev: max_dev,
        accuracy_base,
        accuracy_perturbed,
    })
}

/// Argmax accuracy with deterministic lowest-column tie-breaking.
pub fn accuracy_from_logits(logits: &Matrix, head: &ClassifierHead, labels: &[usize]) -> f64 {
    if logits.rows() == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (j, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = j;
            }
        }
        if head.class_of_column(best) == labels[r] {
            correct += 1;
        }
    }
    correct as f64 / logits.rows() as f64
}

#[cfg(test)]
mod tests;
