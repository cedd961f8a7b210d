//! Dense real linear algebra: row-major matrices, symmetric
//! eigendecomposition, quadratic forms, Gaussian sampling and numerical rank.
//!
//! Everything is `f64` and single-threaded; values are immutable after
//! construction unless explicitly mutated, so shared read access is safe.

mod eig;
mod io;
mod sample;

pub use eig::{sym_eig, SymEigResult};
pub use io::{load_matrix, read_matrix, save_matrix, write_matrix, MATRIX_MAGIC};
pub use sample::{cholesky_psd, sample_gaussian};

use crate::error::{CoreError, Result};

/// Dense row-major matrix of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major data, checking length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical("matrix entries must be finite".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// `self * other`. Panics on inner-dimension mismatch; callers validate
    /// shapes at module boundaries.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                let o_row = out.row_mut(i);
                for (o, &b) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimensions");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale_mut(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    /// Rank-one update `self += w * v * v^T`.
    pub fn add_outer(&mut self, w: f64, v: &[f64]) {
        assert_eq!(self.rows, v.len());
        assert_eq!(self.cols, v.len());
        for (i, &vi) in v.iter().enumerate() {
            let row = self.row_mut(i);
            let s = w * vi;
            for (r, &vj) in row.iter_mut().zip(v.iter()) {
                *r += s * vj;
            }
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Evaluates `v^T s v`. Non-negative whenever `s` is positive semi-definite.
pub fn quadratic_form(s: &Matrix, v: &[f64]) -> Result<f64> {
    if !s.is_square() {
        return Err(CoreError::NotSquare { rows: s.rows(), cols: s.cols() });
    }
    if s.rows() != v.len() {
        return Err(CoreError::Dimension(format!(
            "quadratic form: matrix is {}x{0} but vector has length {}",
            s.rows(),
            v.len()
        )));
    }
    let mut acc = 0.0;
    for (i, &vi) in v.iter().enumerate() {
        let row = s.row(i);
        let mut inner = 0.0;
        for (a, &vj) in row.iter().zip(v.iter()) {
            inner += a * vj;
        }
        acc += vi * inner;
    }
    Ok(acc)
}

/// Counts eigenvalues above `rel_tol * max`. Expects a descending,
/// non-negative spectrum; an all-zero (or empty) spectrum has rank 0.
pub fn numerical_rank(eigenvalues: &[f64], rel_tol: f64) -> usize {
    let max = match eigenvalues.first() {
        Some(&m) if m > 0.0 => m,
        _ => return 0,
    };
    let cut = rel_tol * max;
    eigenvalues.iter().take_while(|&&v| v > cut).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_matrix(rng: &mut crate::Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// PSD matrix built as L * L^T from a random lower-triangular factor.
    fn random_psd(rng: &mut crate::Rng, n: usize) -> Matrix {
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                l.set(i, j, rng.gen_range(-1.0..1.0));
            }
        }
        l.matmul(&l.transpose())
    }

    #[test]
    fn quadratic_form_identity() {
        let s = Matrix::identity(2);
        assert_eq!(quadratic_form(&s, &[3.0, 4.0]).unwrap(), 25.0);
    }

    #[test]
    fn quadratic_form_zero_vector() {
        let mut rng = seeded_rng(1, "qf");
        let s = random_psd(&mut rng, 5);
        assert_eq!(quadratic_form(&s, &[0.0; 5]).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_form_matches_double_loop() {
        let mut rng = seeded_rng(2, "qf");
        for _ in 0..20 {
            let n = rng.gen_range(1..10);
            let s = random_psd(&mut rng, n);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // naive summation oracle
            let mut expect = 0.0;
            for i in 0..n {
                for j in 0..n {
                    expect += v[i] * s.get(i, j) * v[j];
                }
            }
            let got = quadratic_form(&s, &v).unwrap();
            assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn quadratic_form_dimension_error() {
        let s = Matrix::identity(3);
        assert!(quadratic_form(&s, &[1.0, 2.0]).is_err());
        let r = Matrix::zeros(2, 3);
        assert!(quadratic_form(&r, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn numerical_rank_cases() {
        assert_eq!(numerical_rank(&[5.0, 1e-12, 0.0], 1e-8), 1);
        assert_eq!(numerical_rank(&[0.0, 0.0], 1e-8), 0);
        assert_eq!(numerical_rank(&[], 1e-8), 0);
    }

    #[test]
    fn numerical_rank_of_gram_matrix() {
        // A is n x k with independent random columns, so A*A^T has rank k.
        let mut rng = seeded_rng(3, "rank");
        for &(n, k) in &[(6usize, 2usize), (10, 4), (16, 7)] {
            let a = random_matrix(&mut rng, n, k);
            let gram = a.matmul(&a.transpose());
            let eig = sym_eig(&gram).unwrap();
            assert_eq!(numerical_rank(&eig.eigenvalues, 1e-8), k);
        }
    }

    #[test]
    fn matmul_and_transpose_agree_with_loops() {
        let mut rng = seeded_rng(4, "mm");
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-14);
            }
        }
        let t = a.transpose();
        assert_eq!(t.get(2, 1), a.get(1, 2));
    }

    #[test]
    fn from_vec_validates() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, 2.0]).is_ok());
    }

    proptest! {
        // v^T S v >= 0 for any Cholesky-generated PSD matrix S.
        #[test]
        fn quadratic_form_nonnegative_on_psd(seed in 0u64..500, n in 1usize..12) {
            let mut rng = seeded_rng(seed, "psd-prop");
            let s = random_psd(&mut rng, n);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let q = quadratic_form(&s, &v).unwrap();
            prop_assert!(q >= -1e-9 * s.max_abs().max(1.0));
        }
    }
}
