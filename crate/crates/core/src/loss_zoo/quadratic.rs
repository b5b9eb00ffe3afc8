use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::LossModel;
use crate::{Error, ParamVector, Result};

/// Description of a positive-definite quadratic `L(x) = x^T A x / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadraticSpec {
    /// `A = diag(eigenvalues)`.
    Diagonal(Vec<f64>),
    /// Dense symmetric matrix given row by row.
    Dense(Vec<Vec<f64>>),
}

impl QuadraticSpec {
    fn matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            QuadraticSpec::Diagonal(eigs) => {
                if eigs.is_empty() {
                    return Err(Error::Invalid("quadratic needs at least one eigenvalue".into()));
                }
                Ok(DMatrix::from_diagonal(&ParamVector::from_column_slice(eigs)))
            }
            QuadraticSpec::Dense(rows) => {
                let d = rows.len();
                if d == 0 || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Invalid("quadratic matrix must be square and non-empty".into()));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
        }
    }
}

/// `L(x) = x^T A x / 2` with `A` symmetric positive definite and a strict top eigengap.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    a: DMatrix<f64>,
    /// Eigenvalues in decreasing order.
    eigenvalues: Vec<f64>,
    /// Columns are the matching unit eigenvectors.
    eigenvectors: DMatrix<f64>,
}

pub fn quadratic_loss(spec: &QuadraticSpec) -> Result<QuadraticLoss> {
    let a = spec.matrix()?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("quadratic matrix has non-finite entries".into()));
    }
    let scale = a.amax().max(1.0);
    let asym = (&a - a.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(Error::Invalid(format!("quadratic matrix is not symmetric (max |A - A^T| = {asym:e})")));
    }
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut eigenvectors = DMatrix::zeros(a.nrows(), a.nrows());
    for (col, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        eigenvectors.set_column(col, &v);
    }
    if eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::Invalid("quadratic matrix is not positive definite".into()));
    }
    if eigenvalues.len() > 1 && eigenvalues[0] - eigenvalues[1] <= 1e-12 * eigenvalues[0] {
        return Err(Error::Invalid("quadratic needs a strict gap between the top two eigenvalues".into()));
    }
    Ok(QuadraticLoss { a, eigenvalues, eigenvectors })
}

impl QuadraticLoss {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Coordinates of `x` in the eigenbasis (top eigenvector first).
    pub fn to_eigenbasis(&self, x: &ParamVector) -> ParamVector {
        self.eigenvectors.tr_mul(x)
    }

    pub fn from_eigenbasis(&self, c: &ParamVector) -> ParamVector {
        &self.eigenvectors * c
    }

    /// `A^p` applied to `x` through the eigendecomposition.
    pub fn apply_power(&self, x: &ParamVector, p: f64) -> ParamVector {
        let mut c = self.to_eigenbasis(x);
        for (ci, l) in c.iter_mut().zip(&self.eigenvalues) {
            *ci *= l.powf(p);
        }
        self.from_eigenbasis(&c)
    }
}

impl LossModel for QuadraticLoss {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn value(&self, x: &ParamVector) -> f64 {
        0.5 * x.dot(&(&self.a * x))
    }

    fn gradient(&self, x: &ParamVector) -> ParamVector {
        &self.a * x
    }

    fn hvp(&self, _x: &ParamVector, v: &ParamVector) -> ParamVector {
        &self.a * v
    }

    fn third_directional(&self, x: &ParamVector, _v: &ParamVector) -> Option<ParamVector> {
        Some(ParamVector::zeros(x.len()))
    }

    fn name(&self) -> &str {
        "quadratic"
    }
}
