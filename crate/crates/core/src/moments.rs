//! Population moments of the parameter gradient under a Gaussian regressor.
//!
//! For a scalar regressor `X ~ N(0, sigma2_x)` the expectations
//! `A = E[grad f(X; beta)]` and `B = E[grad f grad f^T]` are evaluated with
//! Gauss-Hermite quadrature. They determine the scalar `D = sqrt(A^T B^-1 A)`
//! which sets the time scale of the limiting Wiener supremum.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SpdSolver;
use crate::model::ModelSpec;

pub const DEFAULT_NODES: usize = 64;

/// Law of the scalar regressor, `X ~ N(0, sigma2_x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianRegressorLaw {
    sigma2_x: f64,
}

impl GaussianRegressorLaw {
    pub fn new(sigma2_x: f64) -> Result<Self> {
        if !(sigma2_x > 0.0) || !sigma2_x.is_finite() {
            return Err(Error::Domain(format!("regressor variance must be positive, got {sigma2_x}")));
        }
        Ok(GaussianRegressorLaw { sigma2_x })
    }

    pub fn sigma2_x(&self) -> f64 {
        self.sigma2_x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMoments {
    /// `E[grad f]`
    pub a: DVector<f64>,
    /// `E[grad f grad f^T]`
    pub b: DMatrix<f64>,
    /// `sqrt(A^T B^-1 A)`
    pub d: f64,
    /// `A^T A`
    pub d_a: f64,
}

/// Gauss-Hermite nodes and weights for `int exp(-x^2) h(x) dx`.
///
/// Newton iteration on the orthonormal Hermite recurrence, seeded with the
/// usual asymptotic guesses for the largest roots.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let half = (n + 1) / 2;
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `A`, `B`, `D` and `D_A` for a `p = 1` model at `beta` under `law`.
pub fn gaussian_moments(
    model: &ModelSpec,
    law: &GaussianRegressorLaw,
    beta: &[f64],
    n_nodes: usize,
) -> Result<PopulationMoments> {
    if model.p() != 1 {
        return Err(Error::Domain(format!(
            "Gaussian moments need a scalar regressor, model '{}' has p = {}",
            model.name(),
            model.p()
        )));
    }
    model.check_beta(beta)?;
    if n_nodes < 16 {
        return Err(Error::Domain(format!("need at least 16 quadrature nodes, got {n_nodes}")));
    }
    let q = model.q();
    let (nodes, weights) = gauss_hermite(n_nodes);
    let scale = (2.0 * law.sigma2_x()).sqrt();
    let norm = std::f64::consts::PI.sqrt().recip();

    let mut a = DVector::zeros(q);
    let mut b = DMatrix::zeros(q, q);
    let mut grad = vec![0.0; q];
    for (t, w) in nodes.iter().zip(&weights) {
        let w = w * norm;
        model.gradient_into(&[scale * t], beta, &mut grad);
        for i in 0..q {
            a[i] += w * grad[i];
            for j in 0..=i {
                b[(i, j)] += w * grad[i] * grad[j];
            }
        }
    }
    for i in 0..q {
        for j in 0..i {
            b[(j, i)] = b[(i, j)];
        }
    }
    let d = compute_d(&a, &b)?;
    let d_a = a.dot(&a);
    Ok(PopulationMoments { a, b, d, d_a })
}

/// `(A^T B^-1 A)^(1/2)` by a Cholesky solve.
pub fn compute_d(a: &DVector<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let solver = SpdSolver::new(b)?;
    let d2 = a.dot(&solver.solve(a));
    Ok(d2.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compartmental_model, growth_model, Bounds};
    use std::sync::Arc;

    #[test]
    fn hermite_rule_integrates_gaussian_moments() {
        let (x, w) = gauss_hermite(20);
        let norm = std::f64::consts::PI.sqrt();
        let m0: f64 = w.iter().sum::<f64>() / norm;
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum::<f64>() / norm;
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum::<f64>() / norm;
        assert!((m0 - 1.0).abs() < 1e-14);
        assert!((m2 - 0.5).abs() < 1e-14);
        assert!((m4 - 0.75).abs() < 1e-13);
    }

    #[test]
    fn hermite_nodes_are_sorted_and_symmetric() {
        for n in [16, 64, 128] {
            let (x, w) = gauss_hermite(n);
            assert!(x.windows(2).all(|p| p[0] > p[1]));
            for i in 0..n {
                assert!((x[i] + x[n - 1 - i]).abs() < 1e-12);
                assert!(w[i] > 0.0);
            }
        }
    }

    #[test]
    fn compute_d_trivial_cases() {
        let eye = DMatrix::<f64>::identity(2, 2);
        assert_eq!(compute_d(&DVector::zeros(2), &eye).unwrap(), 0.0);
        assert_eq!(compute_d(&DVector::from_vec(vec![1.0, 0.0]), &eye).unwrap(), 1.0);
    }

    #[test]
    fn compute_d_is_scale_free() {
        let a = DVector::from_vec(vec![0.7, -1.3]);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.5]);
        let d = compute_d(&a, &b).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let dc = compute_d(&(&a * c), &(&b * (c * c))).unwrap();
            assert!((dc - d).abs() <= 1e-12, "c = {c}: {dc} vs {d}");
        }
    }

    #[test]
    fn growth_d_is_one() {
        let law = GaussianRegressorLaw::new(1.0).unwrap();
        let m = gaussian_moments(&growth_model(), &law, &[0.5, 1.0], DEFAULT_NODES).unwrap();
        assert!((m.d - 1.0).abs() < 1e-6);
        assert!((m.a[0] - 1.0).abs() < 1e-12);
        assert!((m.b[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((m.a[1] - m.b[(0, 1)]).abs() < 1e-12);
        // E[X exp(-X)] = -exp(1/2) for X ~ N(0, 1)
        assert!((m.a[1] + 0.5f64.exp()).abs() < 1e-10);
    }

    #[test]
    fn compartmental_d_matches_reported_value() {
        let law = GaussianRegressorLaw::new(1.0).unwrap();
        let m = gaussian_moments(&compartmental_model(), &law, &[1.2, 1.0], DEFAULT_NODES).unwrap();
        assert!((m.d - 0.5741).abs() < 0.005, "D = {}", m.d);
    }

    #[test]
    fn rank_deficient_gradient_is_singular() {
        let model = ModelSpec::new(
            "flat",
            1,
            Arc::new(|_x: &[f64], b: &[f64]| b[0]),
            Arc::new(|_x: &[f64], _b: &[f64], g: &mut [f64]| {
                g[0] = 1.0;
                g[1] = 0.0;
            }),
            vec![Bounds::new(-1.0, 1.0); 2],
        );
        let law = GaussianRegressorLaw::new(1.0).unwrap();
        let err = gaussian_moments(&model, &law, &[0.0, 0.0], DEFAULT_NODES).unwrap_err();
        assert!(matches!(err, Error::SingularMoments { .. }));
    }

    #[test]
    fn preconditions_are_checked() {
        let law = GaussianRegressorLaw::new(1.0).unwrap();
        assert!(gaussian_moments(&growth_model(), &law, &[0.5, 1.0], 8).is_err());
        assert!(gaussian_moments(&growth_model(), &law, &[0.5, -1.0], 64).is_err());
        assert!(GaussianRegressorLaw::new(0.0).is_err());
    }

    #[test]
    fn doubling_nodes_leaves_moments_unchanged() {
        let law = GaussianRegressorLaw::new(1.0).unwrap();
        for (model, beta) in [
            (growth_model(), vec![0.5, 1.0]),
            (growth_model(), vec![-3.0, 2.5]),
            (compartmental_model(), vec![1.2, 1.0]),
            (compartmental_model(), vec![0.3, 2.0]),
        ] {
            let lo = gaussian_moments(&model, &law, &beta, 64).unwrap();
            let hi = gaussian_moments(&model, &law, &beta, 128).unwrap();
            for (x, y) in lo.a.iter().zip(hi.a.iter()).chain(lo.b.iter().zip(hi.b.iter())) {
                assert!((x - y).abs() <= 1e-8 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }
}
