//! Small dense helpers on top of nalgebra for symmetric matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{GeeError, Result};

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(symmetrize(a));
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        SymEigen { values, vectors }
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `V f(Λ) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * f(self.values[j])
        });
        symmetrize(&(scaled * self.vectors.transpose()))
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn lambda_min(a: &DMatrix<f64>) -> f64 {
    SymEigen::new(a).min()
}

pub fn lambda_max(a: &DMatrix<f64>) -> f64 {
    SymEigen::new(a).max()
}

/// Symmetric square root of a positive semi-definite matrix.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymEigen::new(a);
    let scale = eig.max().abs().max(1.0);
    if eig.min() < -1e-12 * scale {
        return Err(GeeError::Singular(format!(
            "square root of an indefinite matrix (lambda_min = {:.3e})",
            eig.min()
        )));
    }
    Ok(eig.map(|v| v.max(0.0).sqrt()))
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(a))
        .ok_or_else(|| GeeError::Singular("matrix is not positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Solves `a x = b` for a general square `a` by partial-pivot LU.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(b).ok_or_else(|| GeeError::Singular("linear system is singular".into()))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(GeeError::Singular("linear system is singular".into()))
    }
}

pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| GeeError::Singular("matrix is not invertible".into()))
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
