//! Multivariate Gaussian sampling through a PSD-tolerant Cholesky factor.

use super::Matrix;
use crate::error::{CoreError, Result};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Cholesky factorization `m = L * L^T` that tolerates positive
/// semi-definite input: zero pivots produce zero columns instead of failing.
/// Genuinely indefinite input is rejected.
pub fn cholesky_psd(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(CoreError::NotSquare { rows: m.rows(), cols: m.cols() });
    }
    let n = m.rows();
    let scale = (0..n).fold(0.0f64, |acc, i| acc.max(m.get(i, i).abs()));
    let pivot_tol = 1e-12 * scale;
    // Off-diagonal residual allowed in a zero-pivot column before the matrix
    // is declared non-PSD.
    let column_tol = 1e-9 * (scale + 1.0);

    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d > pivot_tol {
            let ljj = d.sqrt();
            l.set(j, j, ljj);
            for i in (j + 1)..n {
                let mut s = m.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / ljj);
            }
        } else if d >= -pivot_tol {
            // Semi-definite pivot: the rest of the column must vanish.
            l.set(j, j, 0.0);
            for i in (j + 1)..n {
                let mut s = m.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if s.abs() > column_tol {
                    return Err(CoreError::Numerical(
                        "cholesky: zero pivot with non-zero column, matrix is not PSD".into(),
                    ));
                }
                l.set(i, j, 0.0);
            }
        } else {
            return Err(CoreError::Numerical(format!(
                "cholesky: negative pivot {d:.3e} at index {j}"
            )));
        }
    }
    Ok(l)
}

/// Draws `count` samples from `N(mean, cov)`, one per row.
///
/// The covariance only needs to be PSD. If factorization fails (indefinite
/// or numerically borderline input) an adaptive ridge `eps * trace/dim * I`
/// is added, with `eps` starting at 1e-8 and growing tenfold until the
/// factorization succeeds; persistent failure is a numerical error.
///
/// Output is a pure function of `(mean, cov, count)` and the generator state.
pub fn sample_gaussian(
    mean: &[f64],
    cov: &Matrix,
    count: usize,
    rng: &mut crate::Rng,
) -> Result<Matrix> {
    let n = mean.len();
    if cov.rows() != n || cov.cols() != n {
        return Err(CoreError::Dimension(format!(
            "covariance is {}x{}, mean has length {n}",
            cov.rows(),
            cov.cols()
        )));
    }

    let l = match cholesky_psd(cov) {
        Ok(l) => l,
        Err(_) => {
            let ridge_unit = cov.trace() / n.max(1) as f64;
            let mut eps = 1e-8;
            let mut factor = None;
            while eps <= 1e6 {
                let mut damped = cov.clone();
                for i in 0..n {
                    damped.set(i, i, damped.get(i, i) + eps * ridge_unit);
                }
                if let Ok(l) = cholesky_psd(&damped) {
                    factor = Some(l);
                    break;
                }
                eps *= 10.0;
            }
            factor.ok_or_else(|| {
                CoreError::Numerical("covariance factorization failed even after ridge".into())
            })?
        }
    };

    let mut out = Matrix::zeros(count, n);
    let mut z = vec![0.0; n];
    for r in 0..count {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let row = out.row_mut(r);
        for i in 0..n {
            let mut v = mean[i];
            // L is lower-triangular.
            for (k, &zk) in z.iter().enumerate().take(i + 1) {
                v += l.get(i, k) * zk;
            }
            row[i] = v;
        }
    }
    Ok(out)
}
