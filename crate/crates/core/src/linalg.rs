//! Thin wrappers over faer for the two heavy kernels: sparse SPD solves and
//! dense symmetric eigendecomposition. faer is built without rayon so every
//! result is bitwise reproducible.

use faer::sparse::{SparseColMat, Triplet};
use faer::prelude::*;
use faer::{Mat, Side};

/// Lower-triangular triplet accumulator for a symmetric matrix.
#[derive(Clone, Debug, Default)]
pub struct SymmetricBuilder {
    dim: usize,
    entries: Vec<Triplet<usize, usize, f64>>,
}

impl SymmetricBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds `value` at `(row, col)`; entries above the diagonal are mirrored
    /// into the lower triangle. Duplicates accumulate.
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        let (r, c) = if row >= col { (row, col) } else { (col, row) };
        self.entries.push(Triplet::new(r, c, value));
    }

    /// Cholesky factorization; `None` if the matrix is not positive definite.
    pub fn factor(&self) -> Option<SpdFactor> {
        if self.dim == 0 {
            return Some(SpdFactor { inner: None, dim: 0 });
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(self.dim, self.dim, &self.entries)
            .ok()?;
        let llt = mat.sp_cholesky(Side::Lower).ok()?;
        Some(SpdFactor {
            inner: Some(llt),
            dim: self.dim,
        })
    }
}

pub struct SpdFactor {
    inner: Option<faer::sparse::linalg::solvers::Llt<usize, f64>>,
    dim: usize,
}

impl SpdFactor {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.dim);
        let Some(llt) = &self.inner else {
            return Vec::new();
        };
        let b = Mat::<f64>::from_fn(self.dim, 1, |i, _| rhs[i]);
        let x = llt.solve(&b);
        (0..self.dim).map(|i| x[(i, 0)]).collect()
    }

    /// Solves for several right-hand sides stored as columns.
    pub fn solve_columns(&self, rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let Some(llt) = &self.inner else {
            return rhs.iter().map(|_| Vec::new()).collect();
        };
        let b = Mat::<f64>::from_fn(self.dim, rhs.len(), |i, j| rhs[j][i]);
        let x = llt.solve(&b);
        (0..rhs.len())
            .map(|j| (0..self.dim).map(|i| x[(i, j)]).collect())
            .collect()
    }
}

/// Ascending eigenvalues and matching orthonormal eigenvectors (as columns)
/// of a dense symmetric matrix given row-major.
pub fn symmetric_eigen(dim: usize, row_major: &[f64]) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
    if dim == 0 {
        return Some((Vec::new(), Vec::new()));
    }
    let m = Mat::<f64>::from_fn(dim, dim, |i, j| row_major[i * dim + j]);
    let evd = m.self_adjoint_eigen(Side::Lower).ok()?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let values: Vec<f64> = (0..dim).map(|i| s[i]).collect();
    let vectors = (0..dim)
        .map(|k| (0..dim).map(|i| u[(i, k)]).collect())
        .collect();
    Some((values, vectors))
}

/// Ascending eigenvalues only.
pub fn symmetric_eigenvalues(dim: usize, row_major: &[f64]) -> Option<Vec<f64>> {
    if dim == 0 {
        return Some(Vec::new());
    }
    let m = Mat::<f64>::from_fn(dim, dim, |i, j| row_major[i * dim + j]);
    m.self_adjoint_eigenvalues(Side::Lower).ok()
}

/// `log det` of a dense SPD matrix by Cholesky; `None` if not positive
/// definite.
pub fn dense_cholesky_logdet(dim: usize, row_major: &[f64]) -> Option<f64> {
    if dim == 0 {
        return Some(0.0);
    }
    let m = Mat::<f64>::from_fn(dim, dim, |i, j| row_major[i * dim + j]);
    let llt = m.llt(Side::Lower).ok()?;
    let l = llt.L();
    let mut sum = 0.0;
    for i in 0..dim {
        let d = l[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        sum += d.ln();
    }
    Some(2.0 * sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_solve_small_system() {
        let mut b = SymmetricBuilder::new(3);
        for (r, c, v) in [(0, 0, 4.0), (1, 1, 5.0), (2, 2, 6.0), (0, 1, 1.0), (1, 2, 2.0)] {
            b.add(r, c, v);
        }
        let f = b.factor().unwrap();
        let x = f.solve(&[1.0, 2.0, 3.0]);
        // residual check against the full symmetric matrix
        let a = [[4.0, 1.0, 0.0], [1.0, 5.0, 2.0], [0.0, 2.0, 6.0]];
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i][j] * x[j]).sum::<f64>() - [1.0, 2.0, 3.0][i];
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_is_rejected() {
        let mut b = SymmetricBuilder::new(2);
        b.add(0, 0, 1.0);
        b.add(1, 1, -1.0);
        assert!(b.factor().is_none());
    }

    #[test]
    fn eigen_of_path_graph() {
        let l = [1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0];
        let (vals, vecs) = symmetric_eigen(3, &l).unwrap();
        for (got, want) in vals.iter().zip([0.0, 1.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let n: f64 = vecs[1].iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logdet_of_diagonal() {
        let a = [2.0, 0.0, 0.0, 3.0];
        assert!((dense_cholesky_logdet(2, &a).unwrap() - 6f64.ln()).abs() < 1e-14);
        assert!(dense_cholesky_logdet(2, &[1.0, 0.0, 0.0, 0.0]).is_none());
    }
}
