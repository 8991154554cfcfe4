//! Nonlinear least squares on a data window.
//!
//! The estimator is a box-constrained Levenberg-Marquardt iteration with the
//! analytic Jacobian supplied by the [`ModelSpec`]. Unless pinned, the solver
//! is restarted from a deterministic low-discrepancy set of points inside the
//! parameter box and the start with the lowest final objective wins.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, MAX_CONDITION};
use crate::model::ModelSpec;

/// One `(x, y)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Observation {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Observation { x, y }
    }

    pub fn scalar(x: f64, y: f64) -> Self {
        Observation { x: vec![x], y }
    }

    pub fn is_finite(&self) -> bool {
        self.y.is_finite() && self.x.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Start from this parameter (projected onto the box).
    Pinned(Vec<f64>),
    /// Restart from this many Halton points inside the box.
    Multistart(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub init: Init,
    /// Tolerance on the projected gradient of the mean squared residual / 2.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub lm_lambda0: f64,
    /// Fail with `SingularMoments` when `B_m` is ill-conditioned. Callers that
    /// never invert `B_m` can switch this off and read `cond_b` instead.
    pub check_moments: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            init: Init::Multistart(8),
            grad_tol: 1e-10,
            max_iter: 200,
            lm_lambda0: 1e-3,
            check_moments: true,
        }
    }
}

impl FitOptions {
    pub fn pinned(beta: Vec<f64>) -> Self {
        FitOptions {
            init: Init::Pinned(beta),
            ..FitOptions::default()
        }
    }

    pub fn without_moment_check(self) -> Self {
        FitOptions { check_moments: false, ..self }
    }

    fn validate(&self, q: usize) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig("grad_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.lm_lambda0 > 0.0) {
            return Err(Error::InvalidConfig("lm_lambda0 must be positive".into()));
        }
        match &self.init {
            Init::Pinned(b) if b.len() != q => Err(Error::InvalidConfig(format!(
                "initial parameter has {} entries, model needs {q}",
                b.len()
            ))),
            Init::Multistart(0) => Err(Error::InvalidConfig("multistart count must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Least-squares fit on a window of `m` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalFit {
    pub m: usize,
    pub beta_hat: Vec<f64>,
    /// Residual sum of squares over `m - q`.
    pub sigma2_hat: f64,
    /// Mean gradient at `beta_hat`.
    pub a_m: DVector<f64>,
    /// Mean gradient outer product at `beta_hat`.
    pub b_m: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub cond_b: f64,
    pub iterations: usize,
    /// Some coordinate of `beta_hat` sits on the parameter box.
    pub on_boundary: bool,
}

impl HistoricalFit {
    pub fn sigma_hat(&self) -> f64 {
        self.sigma2_hat.sqrt()
    }
}

/// `y - f(x; beta)`.
pub fn residual(obs: &Observation, model: &ModelSpec, beta: &[f64]) -> f64 {
    obs.y - model.value(&obs.x, beta)
}

/// Mean-centred second moment with divisor `n`.
///
/// Panics on an empty slice.
pub fn sigma2_pooled(errors: &[f64]) -> f64 {
    assert!(!errors.is_empty(), "pooled variance of an empty sample");
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n
}

/// Empirical `(m^-1 sum grad f, m^-1 sum grad f grad f^T)` over `data` at `beta`.
pub fn empirical_moments(data: &[Observation], model: &ModelSpec, beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let q = model.q();
    let mut a = DVector::zeros(q);
    let mut b = DMatrix::zeros(q, q);
    let mut g = vec![0.0; q];
    for obs in data {
        model.gradient_into(&obs.x, beta, &mut g);
        for i in 0..q {
            a[i] += g[i];
            for j in 0..q {
                b[(i, j)] += g[i] * g[j];
            }
        }
    }
    let m = data.len() as f64;
    (a / m, b / m)
}

fn objective(data: &[Observation], model: &ModelSpec, beta: &[f64]) -> f64 {
    data.iter()
        .map(|o| {
            let r = residual(o, model, beta);
            r * r
        })
        .sum()
}

/// Radical inverse in base `b` (Halton coordinate).
fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn multistart_points(model: &ModelSpec, count: usize) -> Vec<Vec<f64>> {
    (1..=count)
        .map(|i| {
            model
                .theta_box()
                .iter()
                .enumerate()
                .map(|(j, r)| r.lo + r.width() * halton(i, PRIMES[j % PRIMES.len()]))
                .collect()
        })
        .collect()
}

struct LocalSolution {
    beta: Vec<f64>,
    sse: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

fn projected_gradient_norm(model: &ModelSpec, beta: &[f64], grad: &DVector<f64>) -> f64 {
    let mut stepped: Vec<f64> = beta.iter().zip(grad.iter()).map(|(b, g)| b - g).collect();
    model.project(&mut stepped);
    beta.iter()
        .zip(&stepped)
        .map(|(b, s)| (b - s) * (b - s))
        .sum::<f64>()
        .sqrt()
}

/// Half-gradient and Gauss-Newton matrix of the mean squared residual.
fn normal_equations(data: &[Observation], model: &ModelSpec, beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let q = model.q();
    let mut jtr = DVector::zeros(q);
    let mut jtj = DMatrix::zeros(q, q);
    let mut g = vec![0.0; q];
    for obs in data {
        let r = residual(obs, model, beta);
        model.gradient_into(&obs.x, beta, &mut g);
        for i in 0..q {
            jtr[i] += g[i] * r;
            for j in 0..q {
                jtj[(i, j)] += g[i] * g[j];
            }
        }
    }
    let n = data.len() as f64;
    (-jtr / n, jtj / n)
}

/// Natural size of the gradient at `beta`: `rms(residual)` times the largest
/// Jacobian column norm, floored at 1.
fn gradient_scale(sse: f64, n: usize, hess: &DMatrix<f64>) -> f64 {
    let max_diag = (0..hess.nrows()).map(|i| hess[(i, i)]).fold(0.0f64, f64::max);
    ((sse / n as f64).sqrt() * max_diag.sqrt()).max(1.0)
}

/// When no damped step lowers the objective any more, a gradient this small
/// relative to [`gradient_scale`] is round-off at a stationary point rather
/// than a failure. Only reachable after descent has stalled, so a far-off
/// start with huge residuals cannot pass it.
const STALL_TOL: f64 = 1e-8;

fn levenberg_marquardt(data: &[Observation], model: &ModelSpec, start: &[f64], opts: &FitOptions) -> LocalSolution {
    let q = model.q();
    let n = data.len();
    let mut beta = start.to_vec();
    model.project(&mut beta);
    let mut sse = objective(data, model, &beta);
    let mut lambda = opts.lm_lambda0;
    let (mut grad, mut hess) = normal_equations(data, model, &beta);
    let mut grad_norm = projected_gradient_norm(model, &beta, &grad);

    for iter in 0..opts.max_iter {
        if grad_norm <= opts.grad_tol {
            return LocalSolution { beta, sse, grad_norm, iterations: iter, converged: true };
        }
        if !sse.is_finite() {
            break;
        }
        if lambda > 1e20 {
            let converged = grad_norm <= STALL_TOL * gradient_scale(sse, n, &hess);
            return LocalSolution { beta, sse, grad_norm, iterations: iter, converged };
        }
        let max_diag = (0..q).map(|i| hess[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
        let mut damped = hess.clone();
        for i in 0..q {
            damped[(i, i)] += lambda * hess[(i, i)].max(1e-12 * max_diag);
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let delta = chol.solve(&(-&grad));
        let mut candidate: Vec<f64> = beta.iter().zip(delta.iter()).map(|(b, d)| b + d).collect();
        model.project(&mut candidate);
        let cand_sse = objective(data, model, &candidate);
        if cand_sse.is_finite() && cand_sse < sse {
            beta = candidate;
            sse = cand_sse;
            lambda = (lambda * 0.3).max(1e-15);
            (grad, hess) = normal_equations(data, model, &beta);
            grad_norm = projected_gradient_norm(model, &beta, &grad);
        } else {
            lambda *= 10.0;
        }
    }
    let converged = grad_norm <= opts.grad_tol;
    LocalSolution { beta, sse, grad_norm, iterations: opts.max_iter, converged }
}

/// Least-squares estimate of `beta` on `data`, with residuals, the variance
/// estimate `SSE / (n - q)` and the empirical gradient moments at the estimate.
pub fn fit_nls(data: &[Observation], model: &ModelSpec, opts: &FitOptions) -> Result<HistoricalFit> {
    let q = model.q();
    let n = data.len();
    if n <= q {
        return Err(Error::DegenerateWindow { n, q });
    }
    opts.validate(q)?;
    if let Some(bad) = data.iter().position(|o| o.x.len() != model.p() || !o.is_finite()) {
        return Err(Error::Domain(format!("observation {bad} is malformed or not finite")));
    }

    let starts = match &opts.init {
        Init::Pinned(b) => vec![b.clone()],
        Init::Multistart(count) => multistart_points(model, *count),
    };
    let mut best: Option<LocalSolution> = None;
    let mut closest: Option<(f64, usize)> = None;
    for start in &starts {
        let sol = levenberg_marquardt(data, model, start, opts);
        if !sol.converged {
            if closest.map_or(true, |(g, _)| sol.grad_norm < g) {
                closest = Some((sol.grad_norm, sol.iterations));
            }
            continue;
        }
        if best.as_ref().map_or(true, |b| sol.sse < b.sse) {
            best = Some(sol);
        }
    }
    let Some(sol) = best else {
        let (grad_norm, iterations) = closest.unwrap_or((f64::NAN, opts.max_iter));
        return Err(Error::NoConvergence { iterations, grad_norm });
    };

    let residuals: Vec<f64> = data.iter().map(|o| residual(o, model, &sol.beta)).collect();
    let sigma2_hat = residuals.iter().map(|r| r * r).sum::<f64>() / (n - q) as f64;
    let (a_m, b_m) = empirical_moments(data, model, &sol.beta);
    let cond_b = condition_number(&b_m);
    if opts.check_moments && !(cond_b <= MAX_CONDITION) {
        return Err(Error::SingularMoments { cond: cond_b });
    }
    let on_boundary = sol
        .beta
        .iter()
        .zip(model.theta_box())
        .any(|(b, r)| *b == r.lo || *b == r.hi);

    Ok(HistoricalFit {
        m: n,
        beta_hat: sol.beta,
        sigma2_hat,
        a_m,
        b_m,
        residuals,
        cond_b,
        iterations: sol.iterations,
        on_boundary,
    })
}
