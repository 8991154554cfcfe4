//! Position-dependent critical values from a residual bootstrap.
//!
//! The stream is cut into blocks of length `L`. At the start of block `j`
//! (stream position `k = jL`) the model is refitted on observations
//! `1..m+k`, and the detector's null distribution is approximated by
//! resampling those residuals with replacement and evaluating the linearised
//! CUSUM
//!
//! ```text
//! G~(l) = [ sum_{m<i<=m+l} e*_i - (m^-1 sum_{j<=m} grad_j^T e*_j) B_m^-1 c1(m,k,l) ] / g(m,l,gamma)
//! ```
//!
//! for every horizon position `l`, scaled by a bootstrap variance estimate.
//! Block statistics are then mixed across blocks and their upper quantiles give
//! one critical value per stream position.
//!
//! Gradients are evaluated at the block refit `beta_hat_{m+k}`; `B_m` is the
//! historical window's matrix. `D_A` is `A^T A` with `A` the mean refit
//! gradient over `1..m+k`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{boundary_g, boundary_unchecked, check_alpha, check_gamma};
use crate::error::{Error, Result};
use crate::linalg::SpdSolver;
use crate::model::ModelSpec;
use crate::nls::{fit_nls, residual, FitOptions, HistoricalFit, Observation};
use crate::rng::{domain, substream};
use crate::stats::quantile;

pub const DEFAULT_REPLICATIONS: usize = 2000;

/// How block statistics are mixed into the distribution for block `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Uniform over every block completed so far, `0..=j`.
    AllBlocks,
    /// Uniform over the last `N` blocks, `max(0, j + 1 - N)..=j`.
    Window(usize),
}

impl Mixing {
    pub fn window(&self) -> Option<usize> {
        match self {
            Mixing::AllBlocks => None,
            Mixing::Window(n) => Some(*n),
        }
    }

    fn range(&self, j: usize) -> std::ops::RangeInclusive<usize> {
        match self {
            Mixing::AllBlocks => 0..=j,
            Mixing::Window(n) => (j + 1).saturating_sub(*n)..=j,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    /// Block length `L`.
    pub block_len: usize,
    pub mixing: Mixing,
    /// Bootstrap replications per block statistic.
    pub replications: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub t_m: usize,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        check_alpha(self.alpha)?;
        if self.block_len == 0 {
            return Err(Error::InvalidConfig("block length must be at least 1".into()));
        }
        if self.t_m == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidConfig("need at least one bootstrap replication".into()));
        }
        if self.mixing == Mixing::Window(0) {
            return Err(Error::InvalidConfig("mixing window must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of blocks `J = T_m / L`, at least one; a remainder is absorbed
    /// by the last block.
    pub fn n_blocks(&self) -> usize {
        (self.t_m / self.block_len).max(1)
    }

    /// Block index serving stream position `k` (1-based).
    pub fn block_of(&self, k: usize) -> usize {
        (k / self.block_len).min(self.n_blocks() - 1)
    }
}

fn dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b)
}

/// `c1(m, k, l) = D_A^-1 B_m s(l)` where `s(l)` sums gradients over
/// `m+1..m+l` when `l <= k`, over `m+k-l+1..m+k` when `k < l < m+k`, and is
/// `l / (m+k)` times the sum over `1..m+k` when `l >= m+k`.
///
/// `grads[i - 1]` is the gradient at observation `i`; at least `m + k` are needed.
pub fn c1_vector(
    m: usize,
    k: usize,
    l: usize,
    grads: &[DVector<f64>],
    b_m: &DMatrix<f64>,
    d_a: f64,
) -> Result<DVector<f64>> {
    if l == 0 {
        return Err(Error::Domain("c1 needs l >= 1".into()));
    }
    if !(d_a > 0.0) {
        return Err(Error::Domain(format!("D_A must be positive, got {d_a}")));
    }
    let n = m + k;
    if grads.len() < n {
        return Err(Error::Domain(format!("need {n} gradients, got {}", grads.len())));
    }
    let q = b_m.nrows();
    let sum_range = |from: usize, to: usize| -> DVector<f64> {
        // 1-based inclusive
        grads[from - 1..to].iter().fold(DVector::zeros(q), |acc, g| acc + g)
    };
    let s = if l <= k {
        sum_range(m + 1, m + l)
    } else if l < n {
        sum_range(n - l + 1, n)
    } else {
        sum_range(1, n) * (l as f64 / n as f64)
    };
    Ok(b_m * s / d_a)
}

fn projection_coefficient(m: usize, errors: &[f64], grads: &[DVector<f64>], q: usize) -> DVector<f64> {
    let mut h = DVector::zeros(q);
    for (g, e) in grads[..m].iter().zip(&errors[..m]) {
        h.axpy(*e, g, 1.0);
    }
    h / m as f64
}

/// Linearised weighted CUSUM `G~(m, k, l, gamma)` of an error sequence.
#[allow(clippy::too_many_arguments)]
pub fn gamma_tilde(
    m: usize,
    k: usize,
    l: usize,
    gamma: f64,
    errors: &[f64],
    grads: &[DVector<f64>],
    b_m: &DMatrix<f64>,
    d_a: f64,
) -> Result<f64> {
    if errors.len() < m + l {
        return Err(Error::Domain(format!("need {} errors, got {}", m + l, errors.len())));
    }
    let g = boundary_g(m, l, gamma)?;
    let c1 = c1_vector(m, k, l, grads, b_m, d_a)?;
    let h = projection_coefficient(m, errors, grads, b_m.nrows());
    let solver = SpdSolver::new(b_m)?;
    let correction = dot(&h, &solver.solve(&c1));
    let cusum: f64 = errors[m..m + l].iter().sum();
    Ok((cusum - correction) / g)
}

/// `count` draws with replacement from `residuals`.
pub fn bootstrap_errors<R: Rng + ?Sized>(residuals: &[f64], count: usize, rng: &mut R) -> Vec<f64> {
    if count == 0 {
        return Vec::new();
    }
    assert!(!residuals.is_empty(), "cannot resample an empty residual set");
    let n = residuals.len();
    (0..count).map(|_| residuals[rng.random_range(0..n)]).collect()
}

fn check_variance(sigma2: f64, errors: &[f64]) -> Result<f64> {
    let scale = errors.iter().map(|e| e * e).sum::<f64>() / errors.len().max(1) as f64;
    if !sigma2.is_finite() || sigma2 <= 1e-20 * scale || sigma2 <= 0.0 {
        return Err(Error::DegenerateBootstrap(format!(
            "bootstrap variance {sigma2:e} vanishes relative to the error scale {scale:e}"
        )));
    }
    Ok(sigma2)
}

/// Bootstrap variance `(m - q)^-1 sum_{i<=m} [e*_i - h^T B_m^-1 grad_i]^2`
/// with `h = m^-1 sum_{j<=m} grad_j e*_j`.
pub fn sigma_star(
    m: usize,
    q: usize,
    errors: &[f64],
    grads_hist: &[DVector<f64>],
    b_m: &DMatrix<f64>,
) -> Result<f64> {
    if m <= q {
        return Err(Error::DegenerateWindow { n: m, q });
    }
    if errors.len() < m || grads_hist.len() < m {
        return Err(Error::Domain(format!("need {m} errors and gradients")));
    }
    let solver = SpdSolver::new(b_m)?;
    let h = projection_coefficient(m, errors, grads_hist, q);
    let ss: f64 = errors[..m]
        .iter()
        .zip(grads_hist)
        .map(|(e, g)| {
            let r = e - dot(&h, &solver.solve(g));
            r * r
        })
        .sum();
    check_variance(ss / (m - q) as f64, &errors[..m])
}

/// Precomputed pieces of the block statistic
/// `V~ = sup_{1<=l<=T_m} |G~(m, k, l, gamma)| / sigma*`.
#[derive(Debug, Clone)]
pub struct BlockStatistic {
    m: usize,
    k: usize,
    t_m: usize,
    q: usize,
    pool: Vec<f64>,
    hist_grads: Vec<DVector<f64>>,
    /// `B_m^-1 grad_i` for `i <= m`.
    hist_proj: Vec<DVector<f64>>,
    /// `B_m^-1 c1(m, k, l)` for `l = 1..=T_m`.
    weights: Vec<DVector<f64>>,
    boundary: Vec<f64>,
    d_a: f64,
}

impl BlockStatistic {
    /// `residuals` and `grads` cover observations `1..=m+k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        m: usize,
        k: usize,
        t_m: usize,
        gamma: f64,
        residuals: Vec<f64>,
        grads: Vec<DVector<f64>>,
        b_m: &DMatrix<f64>,
        d_a: f64,
    ) -> Result<Self> {
        check_gamma(gamma)?;
        let q = b_m.nrows();
        if m <= q {
            return Err(Error::DegenerateWindow { n: m, q });
        }
        if t_m == 0 {
            return Err(Error::Domain("horizon must be at least 1".into()));
        }
        if residuals.len() != m + k || grads.len() != m + k {
            return Err(Error::Domain(format!(
                "block at k = {k} needs {} residuals and gradients",
                m + k
            )));
        }
        let first = residuals[0];
        if residuals.iter().all(|r| *r == first) {
            return Err(Error::DegenerateBootstrap("all residuals in the window are identical".into()));
        }
        let solver = SpdSolver::new(b_m)?;
        let hist_proj = grads[..m].iter().map(|g| solver.solve(g)).collect();
        let weights = (1..=t_m)
            .map(|l| c1_vector(m, k, l, &grads, b_m, d_a).map(|c| solver.solve(&c)))
            .collect::<Result<Vec<_>>>()?;
        let boundary = (1..=t_m).map(|l| boundary_unchecked(m, l, gamma)).collect();
        let hist_grads = grads[..m].to_vec();
        Ok(BlockStatistic {
            m,
            k,
            t_m,
            q,
            pool: residuals,
            hist_grads,
            hist_proj,
            weights,
            boundary,
            d_a,
        })
    }

    /// Builds the block from a refit on `data = observations 1..=m+k`.
    /// Gradients and `B_m` are both evaluated at the refit; `b_m` is used
    /// only when that local matrix is singular.
    pub fn from_refit(
        data: &[Observation],
        model: &ModelSpec,
        beta_refit: &[f64],
        m: usize,
        t_m: usize,
        gamma: f64,
        b_m: &DMatrix<f64>,
    ) -> Result<Self> {
        if data.len() < m {
            return Err(Error::Domain(format!("block data shorter than the history ({} < {m})", data.len())));
        }
        let k = data.len() - m;
        let residuals: Vec<f64> = data.iter().map(|o| residual(o, model, beta_refit)).collect();
        let grads: Vec<DVector<f64>> = data
            .iter()
            .map(|o| DVector::from_vec(model.gradient(&o.x, beta_refit)))
            .collect();
        let mean = grads.iter().fold(DVector::zeros(model.q()), |acc, g| acc + g) / data.len() as f64;
        let d_a = mean.dot(&mean);
        // B_m built from the same gradients keeps the variance step a true
        // projection; the historical matrix is only a fallback.
        let q = model.q();
        let local = grads[..m].iter().fold(DMatrix::zeros(q, q), |acc, g| acc + g * g.transpose()) / m as f64;
        match BlockStatistic::new(m, k, t_m, gamma, residuals.clone(), grads.clone(), &local, d_a) {
            Err(Error::SingularMoments { .. }) => BlockStatistic::new(m, k, t_m, gamma, residuals, grads, b_m, d_a),
            other => other,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_a(&self) -> f64 {
        self.d_a
    }

    pub fn pool(&self) -> &[f64] {
        &self.pool
    }

    /// Evaluates the statistic on a given error sequence of length `m + T_m`.
    pub fn evaluate(&self, errors: &[f64]) -> Result<f64> {
        let m = self.m;
        if errors.len() < m + self.t_m {
            return Err(Error::Domain(format!("need {} errors, got {}", m + self.t_m, errors.len())));
        }
        let h = projection_coefficient(m, errors, &self.hist_grads, self.q);
        let ss: f64 = errors[..m]
            .iter()
            .zip(&self.hist_proj)
            .map(|(e, p)| {
                let r = e - dot(&h, p);
                r * r
            })
            .sum();
        let sigma2 = check_variance(ss / (m - self.q) as f64, &errors[..m])?;
        let mut cusum = 0.0;
        let mut sup = 0.0f64;
        for l in 1..=self.t_m {
            cusum += errors[m + l - 1];
            let g_tilde = (cusum - dot(&h, &self.weights[l - 1])) / self.boundary[l - 1];
            sup = sup.max(g_tilde.abs());
        }
        Ok(sup / sigma2.sqrt())
    }

    /// One bootstrap realisation of the block statistic.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let errors = bootstrap_errors(&self.pool, self.m + self.t_m, rng);
        self.evaluate(&errors)
    }
}

/// One draw of the block statistic for the refit on `data` (observations `1..=m+k`).
#[allow(clippy::too_many_arguments)]
pub fn sample_block_stat<R: Rng + ?Sized>(
    data: &[Observation],
    model: &ModelSpec,
    fit_mk: &HistoricalFit,
    m: usize,
    t_m: usize,
    gamma: f64,
    b_m: &DMatrix<f64>,
    rng: &mut R,
) -> Result<f64> {
    BlockStatistic::from_refit(data, model, &fit_mk.beta_hat, m, t_m, gamma, b_m)?.draw(rng)
}

/// Index of the block whose statistic feeds mixture draw `r` of block `j`.
pub fn mixture_selection(mixing: Mixing, j: usize, r: usize, seed: u64) -> usize {
    let range = mixing.range(j);
    let mut rng = substream(seed, &[domain::BOOTSTRAP_MIX, j as u64, r as u64]);
    rng.random_range(range)
}

/// `W~_j[r] = V~_{s(j, r)}[r]` with `s(j, r)` drawn uniformly from the
/// blocks admitted by `mixing`.
pub fn mix_blocks(samples: &[Vec<f64>], mixing: Mixing, seed: u64) -> Vec<Vec<f64>> {
    (0..samples.len())
        .map(|j| {
            (0..samples[j].len())
                .map(|r| samples[mixture_selection(mixing, j, r, seed)][r])
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub block: usize,
    pub k: usize,
    pub beta_hat: Vec<f64>,
    pub d_a: f64,
    pub mean_statistic: f64,
    pub critical_value: f64,
}

/// Bootstrap critical values `c_{m,k}` for `k = 1..=T_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCriticalValues {
    pub m: usize,
    #[serde(rename = "T_m")]
    pub t_m: usize,
    #[serde(rename = "L")]
    pub block_len: usize,
    /// Mixing window; `null` mixes every completed block.
    #[serde(rename = "N")]
    pub window: Option<usize>,
    #[serde(rename = "M")]
    pub replications: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
    pub c_k: Vec<f64>,
    pub blocks: Vec<BlockDiagnostics>,
}

/// Turns per-block samples into the piecewise-constant critical value schedule.
pub fn schedule_from_samples(samples: &[Vec<f64>], config: &BootstrapConfig) -> Result<Vec<f64>> {
    let block_values = block_critical_values(samples, config)?;
    Ok((1..=config.t_m).map(|k| block_values[config.block_of(k)]).collect())
}

fn block_critical_values(samples: &[Vec<f64>], config: &BootstrapConfig) -> Result<Vec<f64>> {
    if samples.len() != config.n_blocks() {
        return Err(Error::Domain(format!(
            "expected {} block samples, got {}",
            config.n_blocks(),
            samples.len()
        )));
    }
    mix_blocks(samples, config.mixing, config.seed)
        .iter()
        .map(|w| quantile(w, config.alpha))
        .collect()
}

/// Runs the block bootstrap over `history` (length `m`) and the leading
/// `(J - 1) L` stream observations.
pub fn critical_value_schedule(
    history: &[Observation],
    stream: &[Observation],
    model: &ModelSpec,
    hist_fit: &HistoricalFit,
    config: &BootstrapConfig,
) -> Result<BootstrapCriticalValues> {
    config.validate()?;
    let m = history.len();
    if hist_fit.m != m {
        return Err(Error::InvalidConfig(format!(
            "historical fit covers {} observations but the history has {m}",
            hist_fit.m
        )));
    }
    let n_blocks = config.n_blocks();
    let needed = (n_blocks - 1) * config.block_len;
    if stream.len() < needed {
        return Err(Error::InvalidConfig(format!(
            "{n_blocks} blocks of length {} need {needed} stream observations, got {}",
            config.block_len,
            stream.len()
        )));
    }

    let mut data: Vec<Observation> = history.to_vec();
    let mut beta = hist_fit.beta_hat.clone();
    let mut blocks = Vec::with_capacity(n_blocks);
    for j in 0..n_blocks {
        let k = j * config.block_len;
        data.extend_from_slice(&stream[data.len() - m..k]);
        if k > 0 {
            beta = refit(&data, model, &beta)?;
        }
        let stat = BlockStatistic::from_refit(&data, model, &beta, m, config.t_m, config.gamma, &hist_fit.b_m)?;
        blocks.push((beta.clone(), stat));
    }

    let samples: Vec<Vec<f64>> = blocks
        .par_iter()
        .enumerate()
        .map(|(j, (_, stat))| {
            (0..config.replications)
                .map(|r| stat.draw(&mut substream(config.seed, &[domain::BOOTSTRAP_DRAW, j as u64, r as u64])))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let block_values = block_critical_values(&samples, config)?;
    let c_k = (1..=config.t_m).map(|k| block_values[config.block_of(k)]).collect();
    let diagnostics = blocks
        .iter()
        .zip(&samples)
        .zip(&block_values)
        .enumerate()
        .map(|(j, (((beta, stat), sample), c))| BlockDiagnostics {
            block: j,
            k: stat.k(),
            beta_hat: beta.clone(),
            d_a: stat.d_a(),
            mean_statistic: sample.iter().sum::<f64>() / sample.len() as f64,
            critical_value: *c,
        })
        .collect();

    Ok(BootstrapCriticalValues {
        m,
        t_m: config.t_m,
        block_len: config.block_len,
        window: config.mixing.window(),
        replications: config.replications,
        alpha: config.alpha,
        gamma: config.gamma,
        seed: config.seed,
        c_k,
        blocks: diagnostics,
    })
}

/// Warm-started refit; falls back to the multistart search if the warm start
/// stalls.
fn refit(data: &[Observation], model: &ModelSpec, warm: &[f64]) -> Result<Vec<f64>> {
    // only the historical B_m is inverted, so a singular refit is harmless
    let pinned = FitOptions::pinned(warm.to_vec()).without_moment_check();
    match fit_nls(data, model, &pinned) {
        Ok(fit) => Ok(fit.beta_hat),
        Err(Error::NoConvergence { .. }) => {
            Ok(fit_nls(data, model, &FitOptions::default().without_moment_check())?.beta_hat)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{growth_model, linear_model};
    use crate::nls::fit_nls;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn spd() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])
    }

    fn random_grads(n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| v(&[1.0, rng.sample::<f64, _>(StandardNormal)]))
            .collect()
    }

    #[test]
    fn c1_constant_gradient_regimes() {
        let b = spd();
        let d_a = 2.5;
        let grads = vec![v(&[0.4, -1.1]); 10];
        let (m, k) = (4, 3);
        for l in 1..=12 {
            let c1 = c1_vector(m, k, l, &grads, &b, d_a).unwrap();
            let expected = &b * v(&[0.4, -1.1]) * (l as f64) / d_a;
            assert!((c1 - expected).norm() < 1e-12, "l = {l}");
        }
    }

    #[test]
    fn c1_middle_regime_indexes_trailing_window() {
        let b = spd();
        let grads = vec![v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[2.0, 5.0])];
        // m = 2, k = 1, l = 2 sums observations 2..=3
        let c1 = c1_vector(2, 1, 2, &grads, &b, 1.5).unwrap();
        let expected = &b * (v(&[0.0, 1.0]) + v(&[2.0, 5.0])) / 1.5;
        assert!((c1 - expected).norm() < 1e-14);
        assert!(c1_vector(2, 1, 0, &grads, &b, 1.5).is_err());
        assert!(c1_vector(2, 1, 1, &grads, &b, 0.0).is_err());
    }

    #[test]
    fn gamma_tilde_trivial_cases() {
        let (m, k, l, gamma) = (5, 2, 4, 0.25);
        let grads = random_grads(m + k, 1);
        let b = spd();
        assert_eq!(gamma_tilde(m, k, l, gamma, &[0.0; 9], &grads, &b, 1.3).unwrap(), 0.0);

        let zero = vec![DVector::zeros(2); m + k];
        let errs = [0.3, -0.2, 0.5, 0.1, -0.7, 1.0, 2.0, -0.5, 0.25];
        let gt = gamma_tilde(m, k, l, gamma, &errs, &zero, &DMatrix::identity(2, 2), 1.0).unwrap();
        let expected = (1.0 + 2.0 - 0.5 + 0.25) / boundary_g(m, l, gamma).unwrap();
        assert!((gt - expected).abs() < 1e-15);
    }

    #[test]
    fn gamma_tilde_is_linear() {
        let (m, k, gamma) = (6, 3, 0.4);
        let grads = random_grads(m + k, 2);
        let b = spd();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let e1: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
            let e2: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
            let (a, c) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let mix: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| a * x + c * y).collect();
            for l in [1, 3, 8, 9, 14] {
                let lhs = gamma_tilde(m, k, l, gamma, &mix, &grads, &b, 1.7).unwrap();
                let rhs = a * gamma_tilde(m, k, l, gamma, &e1, &grads, &b, 1.7).unwrap()
                    + c * gamma_tilde(m, k, l, gamma, &e2, &grads, &b, 1.7).unwrap();
                assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn bootstrap_error_examples() {
        let mut rng = substream(1, &[]);
        assert!(bootstrap_errors(&[2.5; 4], 50, &mut rng).iter().all(|e| *e == 2.5));
        assert!(bootstrap_errors(&[1.0, 2.0], 0, &mut rng).is_empty());

        let n = 100_000;
        let draws = bootstrap_errors(&[1.0, 2.0, 3.0], n, &mut rng);
        for value in [1.0, 2.0, 3.0] {
            let freq = draws.iter().filter(|d| **d == value).count() as f64 / n as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.005, "{value}: {freq}");
        }
    }

    #[test]
    fn sigma_star_cases() {
        let m = 6;
        let grads = random_grads(m, 4);
        let b = spd();
        assert!(matches!(
            sigma_star(m, 2, &[0.0; 6], &grads, &b),
            Err(Error::DegenerateBootstrap(_))
        ));

        let errs = [0.5, -1.0, 0.25, 2.0, -0.75, 1.5];
        let zero = vec![DVector::zeros(2); m];
        let s = sigma_star(m, 2, &errs, &zero, &DMatrix::identity(2, 2)).unwrap();
        let expected = errs.iter().map(|e| e * e).sum::<f64>() / 4.0;
        assert!((s - expected).abs() < 1e-15);

        let base = sigma_star(m, 2, &errs, &grads, &b).unwrap();
        let scaled: Vec<f64> = errs.iter().map(|e| 3.0 * e).collect();
        let s3 = sigma_star(m, 2, &scaled, &grads, &b).unwrap();
        assert!((s3 - 9.0 * base).abs() <= 1e-12 * s3);
    }

    fn growth_block(m: usize, k: usize, t_m: usize, seed: u64) -> (Vec<Observation>, BlockStatistic) {
        let model = growth_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Observation> = (0..m + k)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                Observation::scalar(x, model.value(&[x], &[0.5, 1.0]) + 0.7 * e)
            })
            .collect();
        let hist = fit_nls(&data[..m], &model, &FitOptions::default()).unwrap();
        let refit = fit_nls(&data, &model, &FitOptions::default()).unwrap();
        let stat = BlockStatistic::from_refit(&data, &model, &refit.beta_hat, m, t_m, 0.3, &hist.b_m).unwrap();
        (data, stat)
    }

    #[test]
    fn block_statistic_matches_direct_formulas() {
        let (m, k, t_m) = (25, 10, 40);
        let (data, stat) = growth_block(m, k, t_m, 8);
        let model = growth_model();
        let refit = fit_nls(&data, &model, &FitOptions::default()).unwrap();
        let grads: Vec<DVector<f64>> = data
            .iter()
            .map(|o| DVector::from_vec(model.gradient(&o.x, &refit.beta_hat)))
            .collect();
        let b_local = grads[..m].iter().fold(DMatrix::zeros(2, 2), |acc, g| acc + g * g.transpose()) / m as f64;
        let mut rng = substream(5, &[]);
        for _ in 0..20 {
            let errors = bootstrap_errors(stat.pool(), m + t_m, &mut rng);
            let fast = stat.evaluate(&errors).unwrap();
            let s2 = sigma_star(m, 2, &errors, &grads, &b_local).unwrap();
            let slow = (1..=t_m)
                .map(|l| gamma_tilde(m, k, l, 0.3, &errors, &grads, &b_local, stat.d_a()).unwrap().abs())
                .fold(0.0, f64::max)
                / s2.sqrt();
            assert!((fast - slow).abs() <= 1e-10 * slow, "{fast} vs {slow}");
        }
    }

    #[test]
    fn singular_local_moments_fall_back_to_history() {
        // a refit where every gradient is parallel: the local B_m is rank one
        let model = linear_model(2);
        let data: Vec<Observation> = (0..12)
            .map(|i| Observation::new(vec![i as f64, 2.0 * i as f64], 0.3 * i as f64 + (i % 3) as f64))
            .collect();
        let b_hist = DMatrix::identity(2, 2);
        let stat = BlockStatistic::from_refit(&data, &model, &[0.1, 0.1], 10, 5, 0.2, &b_hist).unwrap();
        assert_eq!(stat.k(), 2);
    }

    #[test]
    fn single_step_horizon_is_single_term() {
        let (m, k) = (12, 0);
        let (_, stat) = growth_block(m, k, 1, 3);
        let mut rng = substream(2, &[]);
        let errors = bootstrap_errors(stat.pool(), m + 1, &mut rng);
        let v = stat.evaluate(&errors).unwrap();
        let h = projection_coefficient(m, &errors, &stat.hist_grads, 2);
        let s2 = check_variance(
            errors[..m]
                .iter()
                .zip(&stat.hist_proj)
                .map(|(e, p)| (e - h.dot(p)).powi(2))
                .sum::<f64>()
                / (m - 2) as f64,
            &errors[..m],
        )
        .unwrap();
        let single = ((errors[m] - h.dot(&stat.weights[0])) / boundary_g(m, 1, 0.3).unwrap()).abs();
        assert!((v - single / s2.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn ratio_is_scale_invariant() {
        let (_, stat) = growth_block(20, 5, 30, 6);
        let mut rng = substream(8, &[]);
        for _ in 0..10 {
            let errors = bootstrap_errors(stat.pool(), 50, &mut rng);
            let base = stat.evaluate(&errors).unwrap();
            for c in [0.01, 2.0, 1e3] {
                let scaled: Vec<f64> = errors.iter().map(|e| c * e).collect();
                let v = stat.evaluate(&scaled).unwrap();
                assert!((v - base).abs() <= 1e-10 * base);
            }
        }
    }

    #[test]
    fn identical_residuals_are_degenerate() {
        let grads = random_grads(10, 9);
        let err = BlockStatistic::new(8, 2, 5, 0.2, vec![0.3; 10], grads, &spd(), 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateBootstrap(_)));
    }

    #[test]
    fn growth_smoke_statistic_is_positive() {
        let (_, stat) = growth_block(25, 0, 100, 12);
        let mut rng = substream(13, &[]);
        let draws: Vec<f64> = (0..500).map(|_| stat.draw(&mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / 500.0;
        assert!(mean.is_finite() && mean > 0.0);
    }

    fn config(t_m: usize, block_len: usize, replications: usize) -> BootstrapConfig {
        BootstrapConfig {
            block_len,
            mixing: Mixing::AllBlocks,
            replications,
            alpha: 0.05,
            gamma: 0.25,
            t_m,
            seed: 77,
        }
    }

    #[test]
    fn block_layout() {
        let c = config(10, 3, 10);
        assert_eq!(c.n_blocks(), 3);
        let blocks: Vec<usize> = (1..=10).map(|k| c.block_of(k)).collect();
        assert_eq!(blocks, vec![0, 0, 1, 1, 1, 2, 2, 2, 2, 2]);
        assert_eq!(config(5, 10, 1).n_blocks(), 1);
    }

    #[test]
    fn single_block_schedule_is_constant() {
        let samples = vec![(0..200).map(|i| i as f64 * 0.01).collect::<Vec<_>>()];
        let cfg = config(8, 8, 200);
        let c = schedule_from_samples(&samples, &cfg).unwrap();
        let q = quantile(&samples[0], 0.05).unwrap();
        assert!(c.iter().all(|v| *v == q));
    }

    #[test]
    fn point_mass_blocks() {
        let cfg = config(12, 3, 50);
        let samples = vec![vec![2.0; 50]; 4];
        assert!(schedule_from_samples(&samples, &cfg).unwrap().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn two_point_masses_mix_half_and_half() {
        let m_boot = 10_000;
        let cfg = config(4, 2, m_boot);
        let samples = vec![vec![1.0; m_boot], vec![3.0; m_boot]];
        let c = schedule_from_samples(&samples, &cfg).unwrap();
        assert_eq!(c, vec![1.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn window_mixing_forgets_old_blocks() {
        let m_boot = 1000;
        let mut cfg = config(9, 3, m_boot);
        cfg.mixing = Mixing::Window(1);
        let samples = vec![vec![1.0; m_boot], vec![5.0; m_boot], vec![2.0; m_boot]];
        let c = schedule_from_samples(&samples, &cfg).unwrap();
        assert_eq!(c, vec![1.0, 1.0, 5.0, 5.0, 5.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn mixture_frequencies_are_uniform() {
        let draws = 20_000;
        for j in [1usize, 3, 6] {
            let mut counts = vec![0usize; j + 1];
            for r in 0..draws {
                counts[mixture_selection(Mixing::AllBlocks, j, r, 99)] += 1;
            }
            let p = 1.0 / (j + 1) as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            for c in counts {
                let freq = c as f64 / draws as f64;
                assert!((freq - p).abs() <= 3.0 * se, "j = {j}: {freq} vs {p}");
            }
        }
    }

    #[test]
    fn quantiles_non_increasing_in_alpha() {
        let samples: Vec<Vec<f64>> = (0..3)
            .map(|j| (0..500).map(|r| ((r * 37 + j * 11) % 101) as f64).collect())
            .collect();
        let mut prev: Option<Vec<f64>> = None;
        for alpha in [0.01, 0.05, 0.1, 0.25] {
            let mut cfg = config(6, 2, 500);
            cfg.alpha = alpha;
            let c = schedule_from_samples(&samples, &cfg).unwrap();
            if let Some(p) = prev {
                assert!(c.iter().zip(&p).all(|(a, b)| a <= b));
            }
            prev = Some(c);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = config(10, 0, 10);
        assert!(c.validate().is_err());
        c.block_len = 2;
        c.gamma = 0.5;
        assert!(c.validate().is_err());
        c.gamma = 0.1;
        c.mixing = Mixing::Window(0);
        assert!(c.validate().is_err());
        c.mixing = Mixing::Window(2);
        assert!(c.validate().is_ok());
    }
}
