//! Weighted CUSUM monitoring of post-history residuals.
//!
//! After a historical window of `m` observations has been fitted, every new
//! residual is added to a running sum that is normalised by the boundary
//! `g(m, k, gamma) = sqrt(m) (1 + k/m) (k / (k + m))^gamma`. The detector
//! alarms the first time the normalised sum reaches the critical value, either
//! a single asymptotic constant or one bootstrap value per stream position.

use crate::error::{Error, Result};

/// Monitoring horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    OpenEnd,
    /// Monitor at most `T_m` observations after the history.
    ClosedEnd(usize),
}

impl Horizon {
    pub fn limit(&self) -> Option<usize> {
        match self {
            Horizon::OpenEnd => None,
            Horizon::ClosedEnd(t) => Some(*t),
        }
    }
}

/// Critical values used by the stopping rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    /// Alarm when `|Gamma| / sigma >= c`.
    Asymptotic(f64),
    /// Alarm when `|Gamma| / (sigma c_k) > 1`; `c_k[k - 1]` is used at step `k`.
    Bootstrap(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub horizon: Horizon,
    pub scheme: Scheme,
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..0.5).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::Domain(format!("gamma must lie in [0, 0.5), got {gamma}")))
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

impl MonitorConfig {
    pub fn new(gamma: f64, alpha: f64, horizon: Horizon, scheme: Scheme) -> Result<Self> {
        check_gamma(gamma)?;
        check_alpha(alpha)?;
        match (&scheme, horizon) {
            (Scheme::Asymptotic(c), _) => {
                if !(*c > 0.0) {
                    return Err(Error::InvalidConfig(format!("critical value must be positive, got {c}")));
                }
            }
            (Scheme::Bootstrap(_), Horizon::OpenEnd) => {
                return Err(Error::InvalidConfig("bootstrap critical values need a closed-end horizon".into()));
            }
            (Scheme::Bootstrap(c), Horizon::ClosedEnd(t_m)) => {
                if c.len() != t_m {
                    return Err(Error::InvalidConfig(format!(
                        "bootstrap schedule has {} values for a horizon of {t_m}",
                        c.len()
                    )));
                }
                if let Some(bad) = c.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::InvalidConfig(format!("critical value must be positive, got {bad}")));
                }
            }
        }
        Ok(MonitorConfig { gamma, alpha, horizon, scheme })
    }

    /// Critical value in force at stream position `k` (1-based).
    pub fn threshold_at(&self, k: usize) -> f64 {
        match &self.scheme {
            Scheme::Asymptotic(c) => *c,
            Scheme::Bootstrap(c) => c[k - 1],
        }
    }
}

/// `g(m, k, gamma)`, evaluated as `m^(-1/2) (m + k)^(1 - gamma) k^gamma`.
pub fn boundary_g(m: usize, k: usize, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if k == 0 || m == 0 {
        return Err(Error::Domain(format!("boundary needs m, k >= 1 (m = {m}, k = {k})")));
    }
    Ok(boundary_unchecked(m, k, gamma))
}

#[inline]
pub(crate) fn boundary_unchecked(m: usize, k: usize, gamma: f64) -> f64 {
    let (m, k) = (m as f64, k as f64);
    (m + k).powf(1.0 - gamma) * k.powf(gamma) / m.sqrt()
}

/// `sup_{1 <= k <= k_max} (k / (m + k))^(1 - gamma)`, which bounds
/// `k m^(-1/2) / g(m, k, gamma)`.
pub fn km_bound(m: usize, gamma: f64, k_max: usize) -> f64 {
    // increasing in k, so the supremum sits at k_max
    let (m, k) = (m as f64, k_max as f64);
    (k / (m + k)).powf(1.0 - gamma)
}

#[inline]
fn normalised(cum_sum: f64, g: f64, sigma_hat: f64) -> (f64, f64) {
    let gamma_stat = cum_sum.abs() / g;
    (gamma_stat, gamma_stat / sigma_hat)
}

/// Streaming detector state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectorState {
    /// Observations seen since the end of the history.
    pub k: usize,
    /// Sum of every residual fed so far.
    pub cum_sum: f64,
    /// `|cum_sum| / g(m, k, gamma)`; frozen at the alarm.
    pub gamma_stat: f64,
    /// Running supremum of the normalised statistic compared to 1 (bootstrap)
    /// or to `c` (asymptotic).
    pub z_running: f64,
    pub alarm: bool,
    pub tau_hat: Option<usize>,
}

impl DetectorState {
    pub fn new() -> Self {
        DetectorState::default()
    }

    /// Feeds one residual and returns the updated state.
    ///
    /// Once an alarm has fired, `alarm`, `tau_hat` and `gamma_stat` stay
    /// fixed; `k`, `cum_sum` and `z_running` keep tracking the stream.
    pub fn step(&self, residual: f64, m: usize, sigma_hat: f64, config: &MonitorConfig) -> Result<DetectorState> {
        if !(sigma_hat > 0.0) {
            return Err(Error::Domain(format!("sigma_hat must be positive, got {sigma_hat}")));
        }
        let k = self.k + 1;
        if let Some(t_m) = config.horizon.limit() {
            if k > t_m {
                return Err(Error::HorizonExceeded { horizon: t_m });
            }
        }
        let cum_sum = self.cum_sum + residual;
        let g = boundary_g(m, k, config.gamma)?;
        let (gamma_stat, scaled) = normalised(cum_sum, g, sigma_hat);
        let (z, crossed) = match &config.scheme {
            Scheme::Asymptotic(c) => (scaled, scaled >= *c),
            Scheme::Bootstrap(c) => {
                let ratio = scaled / c[k - 1];
                (ratio, ratio > 1.0)
            }
        };
        let z_running = self.z_running.max(z);
        let mut next = DetectorState {
            k,
            cum_sum,
            gamma_stat: self.gamma_stat,
            z_running,
            alarm: self.alarm,
            tau_hat: self.tau_hat,
        };
        if !self.alarm {
            next.gamma_stat = gamma_stat;
            if crossed {
                next.alarm = true;
                next.tau_hat = Some(k);
            }
        }
        Ok(next)
    }
}

/// `sigma_hat^-1 max_{1 <= k <= T_m} |sum_{i <= k} e_i| / g(m, k, gamma)`.
pub fn z_statistic(record: &[f64], m: usize, sigma_hat: f64, gamma: f64, t_m: usize) -> Result<f64> {
    if record.len() != t_m {
        return Err(Error::Domain(format!("record has {} residuals, expected {t_m}", record.len())));
    }
    if !(sigma_hat > 0.0) {
        return Err(Error::Domain(format!("sigma_hat must be positive, got {sigma_hat}")));
    }
    check_gamma(gamma)?;
    let mut cum_sum = 0.0;
    let mut z = 0.0f64;
    for (i, e) in record.iter().enumerate() {
        cum_sum += e;
        let (_, scaled) = normalised(cum_sum, boundary_unchecked(m, i + 1, gamma), sigma_hat);
        z = z.max(scaled);
    }
    Ok(z)
}

/// Bootstrap form `sigma_hat^-1 max_k |sum e_i| / (g(m, k, gamma) c_k)`.
pub fn z_statistic_bootstrap(record: &[f64], m: usize, sigma_hat: f64, gamma: f64, c_k: &[f64]) -> Result<f64> {
    if record.len() != c_k.len() {
        return Err(Error::Domain(format!(
            "record has {} residuals but {} critical values",
            record.len(),
            c_k.len()
        )));
    }
    if !(sigma_hat > 0.0) {
        return Err(Error::Domain(format!("sigma_hat must be positive, got {sigma_hat}")));
    }
    check_gamma(gamma)?;
    let mut cum_sum = 0.0;
    let mut z = 0.0f64;
    for (i, (e, c)) in record.iter().zip(c_k).enumerate() {
        cum_sum += e;
        let (_, scaled) = normalised(cum_sum, boundary_unchecked(m, i + 1, gamma), sigma_hat);
        z = z.max(scaled / c);
    }
    Ok(z)
}

/// Feeds a whole record through a fresh detector.
pub fn replay(record: &[f64], m: usize, sigma_hat: f64, config: &MonitorConfig) -> Result<DetectorState> {
    record
        .iter()
        .try_fold(DetectorState::new(), |s, e| s.step(*e, m, sigma_hat, config))
}
