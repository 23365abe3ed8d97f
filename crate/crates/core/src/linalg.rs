//! Symmetric eigendecomposition and the matrix functions built on it.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-10;

pub fn is_symmetric(m: &Tensor, tol: f64) -> bool {
    let Ok((r, c)) = m.matrix_dims("is_symmetric") else {
        return false;
    };
    r == c && (0..r).all(|i| (0..i).all(|j| (m.at(i, j) - m.at(j, i)).abs() <= tol))
}

fn to_nalgebra(m: &Tensor) -> DMatrix<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    DMatrix::from_row_slice(r, c, m.data())
}

fn from_nalgebra(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[i * c + j] = m[(i, j)];
        }
    }
    out
}

/// Eigen-pairs of a symmetric matrix: eigenvalues and the column matrix of
/// eigenvectors, so that `m = V diag(values) V^T`.
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Tensor,
}

pub fn sym_eigen(m: &Tensor) -> Result<SymEigen> {
    if !is_symmetric(m, SYMMETRY_TOL * (1.0 + m.max_abs())) {
        return Err(Error::Oracle(format!(
            "matrix of shape {:?} is not symmetric",
            m.shape()
        )));
    }
    let eig = SymmetricEigen::new(to_nalgebra(m));
    Ok(SymEigen {
        values: eig.eigenvalues.iter().copied().collect(),
        vectors: from_nalgebra(&eig.eigenvectors),
    })
}

impl SymEigen {
    /// `V diag(f(values)) V^T`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let n = self.values.len();
        let mut out = Tensor::zeros(&[n, n]);
        let v = &self.vectors;
        for (k, &lam) in self.values.iter().enumerate() {
            let fl = f(lam);
            for i in 0..n {
                let vik = v.at(i, k) * fl;
                for j in 0..n {
                    out.data_mut()[i * n + j] += vik * v.at(j, k);
                }
            }
        }
        out
    }
}

fn positive_definite(m: &Tensor) -> Result<SymEigen> {
    let eig = sym_eigen(m)?;
    if let Some(bad) = eig.values.iter().find(|&&l| l <= 0.0) {
        return Err(Error::Oracle(format!(
            "matrix is not positive definite (eigenvalue {bad})"
        )));
    }
    Ok(eig)
}

/// `M^s` for symmetric positive-definite `M`.
pub fn matrix_fractional_power(m: &Tensor, s: f64) -> Result<Tensor> {
    Ok(positive_definite(m)?.apply(|l| l.powf(s)))
}

/// Principal logarithm of a symmetric positive-definite matrix.
pub fn matrix_log(m: &Tensor) -> Result<Tensor> {
    Ok(positive_definite(m)?.apply(f64::ln))
}
