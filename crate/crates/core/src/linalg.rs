use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest condition number accepted before a moment matrix counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Spectral condition number of a symmetric matrix; infinite unless it is
/// positive definite.
pub fn condition_number(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 || sym.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let eig = sym.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factor of a symmetric positive definite matrix that passed the
/// condition-number guard.
#[derive(Debug, Clone)]
pub struct SpdSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    cond: f64,
}

impl SpdSolver {
    pub fn new(sym: &DMatrix<f64>) -> Result<Self> {
        let cond = condition_number(sym);
        if !(cond <= MAX_CONDITION) {
            return Err(Error::SingularMoments { cond });
        }
        let chol = sym
            .clone()
            .cholesky()
            .ok_or(Error::SingularMoments { cond })?;
        Ok(SpdSolver { chol, cond })
    }

    pub fn cond(&self) -> f64 {
        self.cond
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}
