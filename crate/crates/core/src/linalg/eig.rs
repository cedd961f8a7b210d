//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Jacobi is slower than tridiagonalization-based solvers but is simple and
//! delivers eigenvectors orthogonal to machine precision, which the feature
//! matrix diagnostics rely on. The matrices here are at most a few hundred
//! rows, where the cost is irrelevant.

use super::Matrix;
use crate::error::{CoreError, Result};

/// Absolute tolerance for the input symmetry check.
const SYMMETRY_TOL: f64 = 1e-9;
/// Convergence: off-diagonal Frobenius mass relative to diagonal mass.
const CONVERGENCE_RATIO: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;
/// Eigenvalues in (-PSD_CLAMP, 0) are treated as exact zeros on output.
const PSD_CLAMP: f64 = 1e-9;

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted descending; the eigenvector matrix holds the
/// corresponding orthonormal eigenvectors as columns, so the input
/// reconstructs as `U * diag(eigenvalues) * U^T`.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SymEigResult {
    /// Rebuilds `U * diag(l) * U^T`, mainly for verification.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let u = &self.eigenvectors;
        let mut scaled = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                scaled.set(i, j, u.get(i, j) * self.eigenvalues[j]);
            }
        }
        scaled.matmul(&u.transpose())
    }
}

fn off_diagonal_mass(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = a.get(i, j);
            s += 2.0 * v * v;
        }
    }
    s.sqrt()
}

fn diagonal_mass(a: &Matrix) -> f64 {
    let n = a.rows();
    (0..n).map(|i| a.get(i, i) * a.get(i, i)).sum::<f64>().sqrt()
}

/// Diagonalizes a symmetric matrix.
///
/// Returns an error for non-square input, input asymmetric beyond an absolute
/// tolerance of 1e-9, or (pathological) failure to converge in 100 sweeps.
/// Eigenvalues that land in `(-1e-9, 0)` are clamped to exactly 0 so that PSD
/// inputs always report a non-negative spectrum.
pub fn sym_eig(s: &Matrix) -> Result<SymEigResult> {
    if !s.is_square() {
        return Err(CoreError::NotSquare { rows: s.rows(), cols: s.cols() });
    }
    if !s.is_symmetric(SYMMETRY_TOL) {
        return Err(CoreError::NotSymmetric { tol: SYMMETRY_TOL });
    }
    let n = s.rows();
    let mut a = s.clone();
    let mut v = Matrix::identity(n);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let off = off_diagonal_mass(&a);
        let diag = diagonal_mass(&a);
        if off <= CONVERGENCE_RATIO * diag || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = {
                    let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;

                // Rotate rows/columns p and q, keeping `a` symmetric.
                for j in 0..n {
                    if j == p || j == q {
                        continue;
                    }
                    let ajp = a.get(j, p);
                    let ajq = a.get(j, q);
                    let new_jp = c * ajp - sn * ajq;
                    let new_jq = sn * ajp + c * ajq;
                    a.set(j, p, new_jp);
                    a.set(p, j, new_jp);
                    a.set(j, q, new_jq);
                    a.set(q, j, new_jq);
                }
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);

                for j in 0..n {
                    let vjp = v.get(j, p);
                    let vjq = v.get(j, q);
                    v.set(j, p, c * vjp - sn * vjq);
                    v.set(j, q, sn * vjp + c * vjq);
                }
            }
        }
    }
    if !converged {
        let off = off_diagonal_mass(&a);
        let diag = diagonal_mass(&a);
        if off > CONVERGENCE_RATIO * diag && off != 0.0 {
            return Err(CoreError::Numerical(format!(
                "jacobi eigendecomposition did not converge in {MAX_SWEEPS} sweeps \
                 (off-diagonal mass {off:.3e} vs diagonal {diag:.3e})"
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap());

    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut lam = a.get(src, src);
        if lam < 0.0 && lam > -PSD_CLAMP {
            lam = 0.0;
        }
        eigenvalues.push(lam);
        for r in 0..n {
            eigenvectors.set(r, dst, v.get(r, src));
        }
    }
    Ok(SymEigResult { eigenvalues, eigenvectors })
}
