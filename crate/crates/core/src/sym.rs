//! Dense symmetric matrices with exactly symmetric storage.
//!
//! `SymMatrix` keeps one copy of each entry (packed upper triangle), so the
//! symmetry invariant `get(i, j) == get(j, i)` holds bitwise by construction
//! rather than by numerical luck. Dense arithmetic that only produces symmetric
//! results up to rounding goes through [`SymMatrix::from_dense`], which averages
//! each off-diagonal pair once and stores the result.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Number of free entries of a symmetric matrix of order `n`.
pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of entry `(i, j)` in row-major packed upper-triangle order.
///
/// The order is `(0,0), (0,1), .., (0,n-1), (1,1), .., (n-1,n-1)`; both `(i, j)`
/// and `(j, i)` map to the same slot.
pub fn packed_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    debug_assert!(j < n);
    i * (2 * n - i + 1) / 2 + (j - i)
}

/// Raised when the iterative symmetric eigenvalue routine fails to converge
/// within its sweep budget.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("symmetric eigenvalue iteration did not converge for order {order}")]
pub struct EigenFailure {
    pub order: usize,
}

/// Raised by [`SymMatrix::from_rows`] when the input is not exactly symmetric.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("expected a square row list, got {rows} rows and row {row} of length {len}")]
    NotSquare { rows: usize, row: usize, len: usize },
    #[error("entry ({i}, {j}) = {upper} differs from ({j}, {i}) = {lower}; input must be exactly symmetric")]
    NotSymmetric { i: usize, j: usize, upper: f64, lower: f64 },
}

/// A real symmetric matrix of order `n` with packed storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// The zero matrix of order `n`.
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; packed_len(n)] }
    }

    /// The identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Diagonal matrix from the given entries.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Builds from a full row list, rejecting inputs that are not exactly
    /// symmetric. Intended for user-provided data; computed matrices should use
    /// [`SymMatrix::from_dense`].
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ShapeError> {
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ShapeError::NotSquare { rows: n, row: i, len: row.len() });
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if rows[i][j] != rows[j][i] {
                    return Err(ShapeError::NotSymmetric {
                        i,
                        j,
                        upper: rows[i][j],
                        lower: rows[j][i],
                    });
                }
            }
        }
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                m.set(i, j, rows[i][j]);
            }
        }
        Ok(m)
    }

    /// Rebuilds a matrix from packed upper-triangle storage (the layout
    /// [`Self::packed`] exposes and solvers hand back as decision vectors).
    pub fn from_packed(n: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), packed_len(n), "packed length must match order");
        Self { n, data: data.to_vec() }
    }

    /// Symmetrizes an (approximately symmetric) dense matrix by averaging each
    /// off-diagonal pair.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "from_dense requires a square matrix");
        let n = m.nrows();
        let mut s = Self::zeros(n);
        for i in 0..n {
            s.set(i, i, m[(i, i)]);
            for j in (i + 1)..n {
                s.set(i, j, 0.5 * (m[(i, j)] + m[(j, i)]));
            }
        }
        s
    }

    /// Matrix order.
    pub fn order(&self) -> usize {
        self.n
    }

    /// Packed entries in row-major upper-triangle order.
    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[packed_index(self.n, i, j)]
    }

    /// Sets both `(i, j)` and `(j, i)` (one stored slot).
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[packed_index(self.n, i, j)] = v;
    }

    /// Expands to full dense storage.
    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Frobenius inner product `trace(self * other)`.
    pub fn dot(&self, other: &SymMatrix) -> f64 {
        assert_eq!(self.n, other.n, "dot requires matching orders");
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += self.get(i, i) * other.get(i, i);
            for j in (i + 1)..self.n {
                acc += 2.0 * self.get(i, j) * other.get(i, j);
            }
        }
        acc
    }

    /// Quadratic form `v' * self * v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        assert_eq!(v.len(), self.n, "quad_form requires a vector of matching length");
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += self.get(i, i) * v[i] * v[i];
            for j in (i + 1)..self.n {
                acc += 2.0 * self.get(i, j) * v[i] * v[j];
            }
        }
        acc
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn norm_fro(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self + t * other`.
    pub fn axpy(&self, t: f64, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.n, other.n, "axpy requires matching orders");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + t * b)
            .collect();
        SymMatrix { n: self.n, data }
    }

    pub fn scale(&self, t: f64) -> SymMatrix {
        SymMatrix { n: self.n, data: self.data.iter().map(|a| a * t).collect() }
    }

    /// Smallest eigenvalue, accurate to about `1e-10` relative to the spectral
    /// radius. Fails only if the underlying iteration exhausts its sweep budget.
    pub fn min_eig(&self) -> Result<f64, EigenFailure> {
        min_eig_dense(&self.to_dense())
    }

    /// Whether the matrix is positive semidefinite up to `tol`:
    /// `min_eig >= -tol`.
    pub fn is_psd(&self, tol: f64) -> Result<bool, EigenFailure> {
        Ok(self.min_eig()? >= -tol)
    }
}

/// Smallest eigenvalue of a dense symmetric matrix (only the lower triangle is
/// read). See [`SymMatrix::min_eig`].
pub fn min_eig_dense(m: &DMatrix<f64>) -> Result<f64, EigenFailure> {
    let n = m.nrows();
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    let eig = nalgebra::linalg::SymmetricEigen::try_new(m.clone(), 1.0e-13, 30 * n.max(4))
        .ok_or(EigenFailure { order: n })?;
    Ok(eig.eigenvalues.min())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Closed-form eigenvalues of a symmetric 2x2 matrix, smallest first.
    fn eig2(a: f64, b: f64, c: f64) -> (f64, f64) {
        let tr = a + c;
        let det = a * c - b * b;
        let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
        (0.5 * (tr - disc), 0.5 * (tr + disc))
    }

    #[test]
    fn packed_index_covers_triangle_once() {
        let n = 5;
        let mut seen = vec![false; packed_len(n)];
        for i in 0..n {
            for j in i..n {
                let k = packed_index(n, i, j);
                assert!(!seen[k], "slot {k} hit twice");
                seen[k] = true;
                assert_eq!(k, packed_index(n, j, i));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn min_eig_known_values() {
        assert_relative_eq!(
            SymMatrix::from_diagonal(&[3.0, 7.0]).min_eig().unwrap(),
            3.0,
            max_relative = 1e-10
        );
        assert_eq!(SymMatrix::zeros(4).min_eig().unwrap(), 0.0);

        let m = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (lo, hi) = eig2(2.0, 1.0, 2.0);
        assert_relative_eq!(m.min_eig().unwrap(), lo, max_relative = 1e-10);
        assert_relative_eq!(lo, 1.0, max_relative = 1e-14);
        assert_relative_eq!(hi, 3.0, max_relative = 1e-14);
    }

    #[test]
    fn is_psd_examples() {
        assert!(SymMatrix::identity(3).is_psd(0.0).unwrap());
        assert!(!SymMatrix::from_diagonal(&[1.0, -1.0]).is_psd(1e-9).unwrap());

        // A dense positive definite instance; cross-check with the 2x2 closed form.
        let m = SymMatrix::from_rows(&[
            vec![41.0331, -5.7929],
            vec![-5.7929, 54.3889],
        ])
        .unwrap();
        let (lo, _) = eig2(41.0331, -5.7929, 54.3889);
        assert!(lo > 0.0);
        assert!(m.is_psd(0.0).unwrap());
        assert_relative_eq!(m.min_eig().unwrap(), lo, max_relative = 1e-10);
    }

    #[test]
    fn from_rows_rejects_asymmetry() {
        let err = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0 + 1e-12, 1.0]]);
        assert!(matches!(err, Err(ShapeError::NotSymmetric { i: 0, j: 1, .. })));
    }

    #[test]
    fn dot_counts_off_diagonals_twice() {
        let a = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let b = SymMatrix::from_rows(&[vec![5.0, -1.0], vec![-1.0, 4.0]]).unwrap();
        let dense = (a.to_dense() * b.to_dense()).trace();
        assert_relative_eq!(a.dot(&b), dense, max_relative = 1e-14);
        assert_relative_eq!(a.dot(&b), 5.0 - 4.0 + 12.0, max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn from_dense_is_exactly_symmetric(values in proptest::collection::vec(-1e3f64..1e3, 16)) {
            let m = DMatrix::from_row_slice(4, 4, &values);
            let s = SymMatrix::from_dense(&m);
            for i in 0..4 {
                for j in 0..4 {
                    // Bitwise equality, not approximate: one stored slot per pair.
                    prop_assert_eq!(s.get(i, j), s.get(j, i));
                }
            }
        }

        #[test]
        fn quad_form_matches_dense(values in proptest::collection::vec(-10.0f64..10.0, 9),
                                   v in proptest::collection::vec(-10.0f64..10.0, 3)) {
            let s = SymMatrix::from_dense(&DMatrix::from_row_slice(3, 3, &values));
            let v = DVector::from_vec(v);
            let dense = (v.transpose() * s.to_dense() * &v)[(0, 0)];
            prop_assert!((s.quad_form(&v) - dense).abs() <= 1e-9 * (1.0 + dense.abs()));
        }
    }
}
