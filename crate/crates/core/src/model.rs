//! Parametric regression families `y = f(x; beta) + eps`.
//!
//! A [`ModelSpec`] bundles the regression function, its analytic gradient with
//! respect to the parameters, and the compact parameter box the estimator
//! searches. Two families ship with the crate (`growth` and `compartmental`),
//! plus the linear family `f(x; b) = b . x` which is handy for checks that
//! need closed-form least squares.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type ValueFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
pub type GradientFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// Closed interval bound on one parameter coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "empty interval [{lo}, {hi}]");
        Bounds { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// A regression family known up to its parameter vector.
///
/// Immutable after construction; clones share the underlying closures so a
/// single spec can be handed to many Monte-Carlo workers.
#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    p: usize,
    q: usize,
    value: Arc<ValueFn>,
    gradient: Arc<GradientFn>,
    theta_box: Vec<Bounds>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("p", &self.p)
            .field("q", &self.q)
            .field("theta_box", &self.theta_box)
            .finish()
    }
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        p: usize,
        value: Arc<ValueFn>,
        gradient: Arc<GradientFn>,
        theta_box: Vec<Bounds>,
    ) -> Self {
        assert!(p >= 1, "regressor dimension must be positive");
        assert!(!theta_box.is_empty(), "parameter box must be non-empty");
        ModelSpec {
            name: name.into(),
            p,
            q: theta_box.len(),
            value,
            gradient,
            theta_box,
        }
    }

    /// Resolve a built-in model by its CLI name.
    pub fn by_name(name: &str) -> Result<ModelSpec> {
        match name {
            "growth" => Ok(growth_model()),
            "compartmental" => Ok(compartmental_model()),
            "linear" => Ok(linear_model(1)),
            other => Err(Error::InvalidConfig(format!(
                "unknown model '{other}' (expected growth, compartmental or linear)"
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Regressor dimension.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Parameter dimension.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn theta_box(&self) -> &[Bounds] {
        &self.theta_box
    }

    pub fn with_theta_box(mut self, theta_box: Vec<Bounds>) -> Self {
        assert_eq!(theta_box.len(), self.q, "box dimension must equal q");
        self.theta_box = theta_box;
        self
    }

    pub fn value(&self, x: &[f64], beta: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.p);
        debug_assert_eq!(beta.len(), self.q);
        (self.value)(x, beta)
    }

    /// Writes the gradient with respect to `beta` into `out` (length q).
    pub fn gradient_into(&self, x: &[f64], beta: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.q);
        (self.gradient)(x, beta, out)
    }

    pub fn gradient(&self, x: &[f64], beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.q];
        self.gradient_into(x, beta, &mut out);
        out
    }

    pub fn in_box(&self, beta: &[f64]) -> bool {
        beta.len() == self.q && beta.iter().zip(&self.theta_box).all(|(b, r)| r.contains(*b))
    }

    /// Projects `beta` onto the parameter box in place.
    pub fn project(&self, beta: &mut [f64]) {
        for (b, r) in beta.iter_mut().zip(&self.theta_box) {
            *b = r.clamp(*b);
        }
    }

    pub fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.q {
            return Err(Error::Domain(format!(
                "model '{}' has {} parameters, got {}",
                self.name,
                self.q,
                beta.len()
            )));
        }
        if !self.in_box(beta) {
            return Err(Error::Domain(format!(
                "parameter {beta:?} outside the box of model '{}'",
                self.name
            )));
        }
        Ok(())
    }
}

/// `f(x; b) = b1 - exp(-b2 x)`, gradient `(1, x exp(-b2 x))`.
pub fn growth_model() -> ModelSpec {
    ModelSpec::new(
        "growth",
        1,
        Arc::new(|x: &[f64], b: &[f64]| b[0] - (-b[1] * x[0]).exp()),
        Arc::new(|x: &[f64], b: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            g[1] = x[0] * (-b[1] * x[0]).exp();
        }),
        vec![Bounds::new(-10.0, 10.0), Bounds::new(0.01, 10.0)],
    )
}

/// Two-compartment curve `f(x; b) = b1 exp(-b1 x) + b2 exp(-b2 x)`.
pub fn compartmental_model() -> ModelSpec {
    ModelSpec::new(
        "compartmental",
        1,
        Arc::new(|x: &[f64], b: &[f64]| {
            b[0] * (-b[0] * x[0]).exp() + b[1] * (-b[1] * x[0]).exp()
        }),
        Arc::new(|x: &[f64], b: &[f64], g: &mut [f64]| {
            for i in 0..2 {
                g[i] = (1.0 - b[i] * x[0]) * (-b[i] * x[0]).exp();
            }
        }),
        vec![Bounds::new(0.01, 10.0), Bounds::new(0.01, 10.0)],
    )
}

/// Linear family `f(x; b) = sum_i b_i x_i` with `p = q = dim`.
pub fn linear_model(dim: usize) -> ModelSpec {
    ModelSpec::new(
        "linear",
        dim,
        Arc::new(|x: &[f64], b: &[f64]| x.iter().zip(b).map(|(xi, bi)| xi * bi).sum()),
        Arc::new(|x: &[f64], _b: &[f64], g: &mut [f64]| g.copy_from_slice(x)),
        vec![Bounds::new(-1e6, 1e6); dim],
    )
}

/// Default pre-change parameter used by the CLI when none is supplied.
pub fn default_beta0(model: &ModelSpec) -> Option<Vec<f64>> {
    match model.name() {
        "growth" => Some(vec![0.5, 1.0]),
        "compartmental" => Some(vec![1.2, 1.0]),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_difference(model: &ModelSpec, x: &[f64], beta: &[f64]) -> Vec<f64> {
        (0..model.q())
            .map(|j| {
                let h = 1e-6 * (1.0 + beta[j].abs());
                let mut up = beta.to_vec();
                let mut dn = beta.to_vec();
                up[j] += h;
                dn[j] -= h;
                (model.value(x, &up) - model.value(x, &dn)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn growth_examples() {
        let m = growth_model();
        assert_eq!((m.p(), m.q()), (1, 2));
        assert_eq!(m.value(&[0.0], &[0.5, 1.0]), -0.5);
        assert_eq!(m.gradient(&[0.0], &[0.5, 1.0]), vec![1.0, 0.0]);
        let expected = 1.0 - (-2.0f64).exp();
        assert!((m.value(&[1.0], &[1.0, 2.0]) - expected).abs() < 1e-15);
        assert!((expected - 0.864665).abs() < 1e-6);
    }

    #[test]
    fn compartmental_examples() {
        let m = compartmental_model();
        assert!((m.value(&[0.0], &[1.2, 1.0]) - 2.2).abs() < 1e-15);
        assert_eq!(m.gradient(&[0.0], &[1.2, 1.0]), vec![1.0, 1.0]);
        let expected = 2.0 * (-1.0f64).exp();
        assert!((m.value(&[1.0], &[1.0, 1.0]) - expected).abs() < 1e-15);
        assert!((expected - 0.735759).abs() < 1e-6);
    }

    #[test]
    fn unknown_name_rejected() {
        assert!(ModelSpec::by_name("logistic").is_err());
        assert_eq!(ModelSpec::by_name("growth").unwrap().name(), "growth");
    }

    #[test]
    fn projection_clamps_to_box() {
        let m = compartmental_model();
        let mut b = vec![-3.0, 42.0];
        m.project(&mut b);
        assert_eq!(b, vec![0.01, 10.0]);
        assert!(m.in_box(&b));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn growth_gradient_matches_finite_differences(
            x in -3.0f64..3.0, b1 in -5.0f64..5.0, b2 in 0.05f64..3.0,
        ) {
            let m = growth_model();
            let beta = [b1, b2];
            let fd = central_difference(&m, &[x], &beta);
            let an = m.gradient(&[x], &beta);
            for (a, n) in an.iter().zip(&fd) {
                prop_assert!(rel_err(*a, *n) <= 1e-6, "{a} vs {n}");
            }
        }

        #[test]
        fn compartmental_gradient_matches_finite_differences(
            x in -3.0f64..3.0, b1 in 0.05f64..3.0, b2 in 0.05f64..3.0,
        ) {
            let m = compartmental_model();
            let beta = [b1, b2];
            let fd = central_difference(&m, &[x], &beta);
            let an = m.gradient(&[x], &beta);
            for (a, n) in an.iter().zip(&fd) {
                prop_assert!(rel_err(*a, *n) <= 1e-6, "{a} vs {n}");
            }
        }
    }
}
