//! Critical values from the limiting law of the detector.
//!
//! Under the no-change hypothesis the normalised detector converges to
//! `V = sup_{0 < t <= t_upper} (1 + t - D^2 t) |W(t)| / t^gamma` with `W` a
//! standard Wiener process, `t_upper = 1 / D^2` for open-end monitoring and
//! `T / (1 + D^2 T)` for closed-end monitoring with `T_m / m -> T`. The
//! supremum is approximated on a uniform grid that excludes `t = 0` and the
//! critical value is an upper order statistic of `M` independent draws.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{check_alpha, check_gamma};
use crate::error::{Error, Result};
use crate::rng::{domain, substream};
use crate::stats::{quantile, quantile_standard_error};

pub const DEFAULT_GRID: usize = 8192;
pub const DEFAULT_REPLICATIONS: usize = 50_000;
const SE_RESAMPLES: usize = 200;

/// Horizon of the limit law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LimitHorizon {
    OpenEnd,
    /// `T = lim T_m / m`.
    ClosedEnd { t: f64 },
}

impl LimitHorizon {
    pub fn t_upper(&self, d: f64) -> f64 {
        let d2 = d * d;
        match self {
            LimitHorizon::OpenEnd => 1.0 / d2,
            LimitHorizon::ClosedEnd { t } => t / (1.0 + d2 * t),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LimitHorizon::ClosedEnd { t } if !(*t > 0.0) || !t.is_finite() => {
                Err(Error::Domain(format!("closed-end ratio T must be positive and finite, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

/// Which version of the limiting law to simulate. The forms agree at `D = 1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LimitForm {
    /// `(1 + t - D^2 t) |W(t)| / t^gamma` on `(0, t_upper(D)]`.
    #[default]
    Theorem,
    /// `|W(t)| / [(1 + t - D^2 t)^(1 - gamma) t^gamma]` on `(0, t_upper(D)]`,
    /// obtained by changing variables in the detector directly; matches
    /// simulations of the finite-sample statistic when `D != 1`.
    Derived,
    /// The theorem form with `D` in place of `D^2` throughout. Published
    /// critical-value tables for `D != 1` follow this form.
    Tabulated,
}

impl LimitForm {
    /// The coefficient playing the role of `D^2`.
    fn d2(self, d: f64) -> f64 {
        match self {
            LimitForm::Theorem | LimitForm::Derived => d * d,
            LimitForm::Tabulated => d,
        }
    }

    pub fn t_upper(self, horizon: LimitHorizon, d: f64) -> f64 {
        horizon.t_upper(self.d2(d).sqrt())
    }

    fn weight(self, t: f64, gamma: f64, d: f64) -> f64 {
        let base = 1.0 + (1.0 - self.d2(d)) * t;
        match self {
            LimitForm::Theorem | LimitForm::Tabulated => base / t.powf(gamma),
            LimitForm::Derived => 1.0 / (base.powf(1.0 - gamma) * t.powf(gamma)),
        }
    }
}

fn check_d(d: f64) -> Result<()> {
    if d > 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("D must be positive, got {d}")))
    }
}

/// Uniform grid `t_i = i t_upper / n_grid`, `i = 1..=n_grid`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WienerGrid {
    pub n_grid: usize,
    pub t_upper: f64,
}

impl WienerGrid {
    pub fn new(n_grid: usize, t_upper: f64) -> Result<Self> {
        if n_grid == 0 {
            return Err(Error::Domain("grid needs at least one point".into()));
        }
        if !(t_upper > 0.0) || !t_upper.is_finite() {
            return Err(Error::Domain(format!("grid upper end must be positive, got {t_upper}")));
        }
        Ok(WienerGrid { n_grid, t_upper })
    }

    pub fn for_horizon(n_grid: usize, horizon: LimitHorizon, d: f64) -> Result<Self> {
        check_d(d)?;
        horizon.validate()?;
        WienerGrid::new(n_grid, horizon.t_upper(d))
    }

    pub fn step(&self) -> f64 {
        self.t_upper / self.n_grid as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.t_upper * (i + 1) as f64 / self.n_grid as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_grid).map(|i| self.point(i)).collect()
    }
}

fn weights(grid: &WienerGrid, gamma: f64, d: f64, form: LimitForm) -> Vec<f64> {
    grid.points().into_iter().map(|t| form.weight(t, gamma, d)).collect()
}

/// A Brownian path observed on a uniform grid (the origin is implicit).
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    pub grid: WienerGrid,
    /// `W(t_i)` for each grid point.
    pub values: Vec<f64>,
}

impl WienerPath {
    pub fn simulate<R: Rng + ?Sized>(grid: WienerGrid, rng: &mut R) -> Self {
        let sd = grid.step().sqrt();
        let mut w = 0.0;
        let values = (0..grid.n_grid)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                w += sd * z;
                w
            })
            .collect();
        WienerPath { grid, values }
    }

    /// Halves the spacing by sampling Brownian-bridge midpoints.
    pub fn refine<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let grid = WienerGrid { n_grid: 2 * self.grid.n_grid, t_upper: self.grid.t_upper };
        let sd = (self.grid.step() / 4.0).sqrt();
        let mut values = Vec::with_capacity(grid.n_grid);
        let mut left = 0.0;
        for &right in &self.values {
            let z: f64 = rng.sample(StandardNormal);
            values.push(0.5 * (left + right) + sd * z);
            values.push(right);
            left = right;
        }
        WienerPath { grid, values }
    }

    /// `max_{t_i <= t_max} (1 + t_i - D^2 t_i) |W(t_i)| / t_i^gamma`.
    pub fn weighted_sup(&self, gamma: f64, d: f64, t_max: f64) -> f64 {
        let slope = 1.0 - d * d;
        self.values
            .iter()
            .enumerate()
            .map(|(i, w)| (self.grid.point(i), w))
            .take_while(|(t, _)| *t <= t_max * (1.0 + 1e-12))
            .map(|(t, w)| (1.0 + slope * t) * w.abs() / t.powf(gamma))
            .fold(0.0, f64::max)
    }
}

fn draw_with_weights<R: Rng + ?Sized>(grid: &WienerGrid, weights: &[f64], rng: &mut R) -> f64 {
    let sd = grid.step().sqrt();
    let mut w = 0.0f64;
    let mut sup = 0.0f64;
    for wt in weights {
        let z: f64 = rng.sample(StandardNormal);
        w += sd * z;
        sup = sup.max(wt * w.abs());
    }
    sup
}

/// One draw of the discretised supremum `V`.
pub fn sample_v<R: Rng + ?Sized>(
    gamma: f64,
    d: f64,
    horizon: LimitHorizon,
    grid: &WienerGrid,
    rng: &mut R,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_d(d)?;
    horizon.validate()?;
    let expected = horizon.t_upper(d);
    if (grid.t_upper - expected).abs() > 1e-12 * expected {
        return Err(Error::Domain(format!(
            "grid ends at {} but the horizon needs {expected}",
            grid.t_upper
        )));
    }
    Ok(draw_with_weights(grid, &weights(grid, gamma, d, LimitForm::Theorem), rng))
}

/// `M` independent draws of `V`; draw `r` uses its own substream of `seed`.
pub fn simulate_v(
    gamma: f64,
    d: f64,
    horizon: LimitHorizon,
    replications: usize,
    n_grid: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    simulate_v_form(gamma, d, horizon, LimitForm::Theorem, replications, n_grid, seed)
}

pub fn simulate_v_form(
    gamma: f64,
    d: f64,
    horizon: LimitHorizon,
    form: LimitForm,
    replications: usize,
    n_grid: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    check_d(d)?;
    horizon.validate()?;
    let grid = WienerGrid::new(n_grid, form.t_upper(horizon, d))?;
    let wts = weights(&grid, gamma, d, form);
    Ok((0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, &[domain::WIENER, r as u64]);
            draw_with_weights(&grid, &wts, &mut rng)
        })
        .collect())
}

/// Calibrated asymptotic critical value with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub gamma: f64,
    pub alpha: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub horizon: LimitHorizon,
    #[serde(default)]
    pub form: LimitForm,
    #[serde(rename = "M")]
    pub replications: usize,
    pub n_grid: usize,
    pub seed: u64,
    pub c_alpha: f64,
    pub standard_error: f64,
}

/// `(1 - alpha)` quantile of `V` from `M` simulated draws.
pub fn critical_value(
    gamma: f64,
    alpha: f64,
    d: f64,
    horizon: LimitHorizon,
    replications: usize,
    n_grid: usize,
    seed: u64,
) -> Result<CalibrationResult> {
    critical_value_form(gamma, alpha, d, horizon, LimitForm::Theorem, replications, n_grid, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn critical_value_form(
    gamma: f64,
    alpha: f64,
    d: f64,
    horizon: LimitHorizon,
    form: LimitForm,
    replications: usize,
    n_grid: usize,
    seed: u64,
) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    if replications < 1000 {
        return Err(Error::Domain(format!("need at least 1000 replications, got {replications}")));
    }
    let sample = simulate_v_form(gamma, d, horizon, form, replications, n_grid, seed)?;
    let c_alpha = quantile(&sample, alpha)?;
    let standard_error = quantile_standard_error(&sample, alpha, SE_RESAMPLES, seed)?;
    Ok(CalibrationResult {
        gamma,
        alpha,
        d,
        horizon,
        form,
        replications,
        n_grid,
        seed,
        c_alpha,
        standard_error,
    })
}
