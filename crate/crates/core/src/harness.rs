//! Monte-Carlo size, power and detection-delay experiments.
//!
//! Each replication simulates a history of `m` observations under `beta0`
//! and a stream of `T_m` observations that switches to `beta1` after stream
//! index `k0`, fits the history, calibrates (asymptotic constant or a fresh
//! bootstrap schedule) and runs the detector over the stream. Replications use
//! disjoint substreams of the scenario seed and run in parallel.

use std::time::Instant;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{critical_value_schedule, BootstrapConfig, Mixing};
use crate::detector::{check_alpha, check_gamma, replay, Horizon, MonitorConfig, Scheme};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::nls::{fit_nls, residual, FitOptions, Observation};
use crate::rng::{domain, substream};

/// How each replication obtains its critical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemePlan {
    /// One constant shared by every replication.
    Asymptotic { c_alpha: f64 },
    /// A block bootstrap rerun on every replication's own data.
    Bootstrap {
        block_len: usize,
        /// Mixing window; `None` mixes every completed block.
        window: Option<usize>,
        replications: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub model: String,
    pub beta0: Vec<f64>,
    /// Post-change parameter, used from stream index `k0 + 1` on.
    pub beta1: Vec<f64>,
    pub sigma2_eps: f64,
    pub sigma2_x: f64,
    pub m: usize,
    #[serde(rename = "T_m")]
    pub t_m: usize,
    /// `None` simulates the no-change hypothesis.
    pub k0: Option<usize>,
    pub gamma: f64,
    pub alpha: f64,
    pub scheme: SchemePlan,
    pub reps: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::by_name(&self.model)
    }

    pub fn validate(&self) -> Result<ModelSpec> {
        let model = self.model_spec()?;
        check_gamma(self.gamma)?;
        check_alpha(self.alpha)?;
        model.check_beta(&self.beta0)?;
        model.check_beta(&self.beta1)?;
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if self.t_m == 0 {
            return Err(Error::InvalidConfig("T_m must be at least 1".into()));
        }
        if self.m <= model.q() {
            return Err(Error::DegenerateWindow { n: self.m, q: model.q() });
        }
        if let Some(k0) = self.k0 {
            if k0 == 0 || k0 > self.t_m {
                return Err(Error::InvalidConfig(format!("k0 must lie in [1, {}], got {k0}", self.t_m)));
            }
        }
        if !(self.sigma2_eps >= 0.0 && self.sigma2_eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma2_eps must be >= 0, got {}", self.sigma2_eps)));
        }
        if !(self.sigma2_x > 0.0 && self.sigma2_x.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma2_x must be > 0, got {}", self.sigma2_x)));
        }
        match &self.scheme {
            SchemePlan::Asymptotic { c_alpha } => {
                if !(*c_alpha > 0.0) {
                    return Err(Error::InvalidConfig(format!("critical value must be positive, got {c_alpha}")));
                }
            }
            SchemePlan::Bootstrap { .. } => self.bootstrap_config(0).expect("bootstrap plan").validate()?,
        }
        Ok(model)
    }

    fn bootstrap_config(&self, seed: u64) -> Option<BootstrapConfig> {
        match &self.scheme {
            SchemePlan::Asymptotic { .. } => None,
            SchemePlan::Bootstrap { block_len, window, replications } => Some(BootstrapConfig {
                block_len: *block_len,
                mixing: window.map_or(Mixing::AllBlocks, Mixing::Window),
                replications: *replications,
                alpha: self.alpha,
                gamma: self.gamma,
                t_m: self.t_m,
                seed,
            }),
        }
    }

    /// Parameter in force at stream index `k` (1-based).
    pub fn beta_at(&self, k: usize) -> &[f64] {
        match self.k0 {
            Some(k0) if k > k0 => &self.beta1,
            _ => &self.beta0,
        }
    }
}

/// History and stream for replication `rep`.
pub fn simulate_stream(scenario: &Scenario, rep: usize) -> Result<(Vec<Observation>, Vec<Observation>)> {
    let model = scenario.model_spec()?;
    let mut rng = substream(scenario.seed, &[domain::SIMULATE, rep as u64]);
    let x_law = Normal::new(0.0, scenario.sigma2_x.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let eps_law = Normal::new(0.0, scenario.sigma2_eps.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let draw = |beta: &[f64], rng: &mut dyn RngCore| {
        let x: Vec<f64> = (0..model.p()).map(|_| x_law.sample(rng)).collect();
        let y = model.value(&x, beta) + eps_law.sample(rng);
        Observation::new(x, y)
    };
    let history = (0..scenario.m).map(|_| draw(&scenario.beta0, &mut rng)).collect();
    let stream = (1..=scenario.t_m).map(|k| draw(scenario.beta_at(k), &mut rng)).collect();
    Ok((history, stream))
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub alarm: bool,
    pub tau_hat: Option<usize>,
    /// Running maximum of the normalised statistic over the whole stream.
    pub z_max: f64,
    pub sigma_hat: f64,
    pub beta_hat: Vec<f64>,
    /// Set when the replication failed; such records are excluded from rates.
    pub error: Option<String>,
}

fn run_rep(scenario: &Scenario, model: &ModelSpec, rep: usize) -> RepRecord {
    match try_rep(scenario, model, rep) {
        Ok(record) => record,
        Err(e) => RepRecord {
            rep,
            alarm: false,
            tau_hat: None,
            z_max: f64::NAN,
            sigma_hat: f64::NAN,
            beta_hat: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

fn try_rep(scenario: &Scenario, model: &ModelSpec, rep: usize) -> Result<RepRecord> {
    let (history, stream) = simulate_stream(scenario, rep)?;
    // only the bootstrap inverts B_m
    let opts = match scenario.scheme {
        SchemePlan::Asymptotic { .. } => FitOptions::default().without_moment_check(),
        SchemePlan::Bootstrap { .. } => FitOptions::default(),
    };
    let fit = fit_nls(&history, model, &opts)?;
    let sigma_hat = fit.sigma_hat();
    if !(sigma_hat > 0.0) {
        return Err(Error::Domain("historical residual variance is zero".into()));
    }
    let scheme = match &scenario.scheme {
        SchemePlan::Asymptotic { c_alpha } => Scheme::Asymptotic(*c_alpha),
        SchemePlan::Bootstrap { .. } => {
            let seed = substream(scenario.seed, &[domain::SCENARIO_CALIBRATION, rep as u64]).random();
            let config = scenario.bootstrap_config(seed).expect("bootstrap plan");
            Scheme::Bootstrap(critical_value_schedule(&history, &stream, model, &fit, &config)?.c_k)
        }
    };
    let config = MonitorConfig::new(scenario.gamma, scenario.alpha, Horizon::ClosedEnd(scenario.t_m), scheme)?;
    let residuals: Vec<f64> = stream.iter().map(|o| residual(o, model, &fit.beta_hat)).collect();
    let state = replay(&residuals, scenario.m, sigma_hat, &config)?;
    Ok(RepRecord {
        rep,
        alarm: state.alarm,
        tau_hat: state.tau_hat,
        z_max: state.z_running,
        sigma_hat,
        beta_hat: fit.beta_hat,
        error: None,
    })
}

/// Five-number summary of detection times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSummary {
    pub min: usize,
    pub median: usize,
    pub mean: f64,
    pub q3: usize,
    pub max: usize,
}

/// Minimum, median, mean, third quartile and maximum; the quartiles take the
/// lower order statistic, `sorted[floor(p (n - 1))]`.
pub fn summarize_tau(taus: &[usize]) -> Result<TauSummary> {
    if taus.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut sorted = taus.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(TauSummary {
        min: sorted[0],
        median: sorted[(n - 1) / 2],
        mean: sorted.iter().map(|t| *t as f64).sum::<f64>() / n as f64,
        q3: sorted[3 * (n - 1) / 4],
        max: sorted[n - 1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Size,
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub scenario: Scenario,
    /// Alarm fraction among successful replications: the empirical size for a
    /// no-change scenario, the empirical power otherwise.
    pub rate: f64,
    pub n_valid: usize,
    pub n_failed: usize,
    pub n_no_detect: usize,
    pub tau_summary: Option<TauSummary>,
    pub runtime_secs: f64,
    pub records: Vec<RepRecord>,
}

impl ExperimentReport {
    pub fn empirical_size(&self) -> Option<f64> {
        (self.kind == ExperimentKind::Size).then_some(self.rate)
    }

    pub fn empirical_power(&self) -> Option<f64> {
        (self.kind == ExperimentKind::Power).then_some(self.rate)
    }

    /// Detection times of the replications that alarmed.
    pub fn taus(&self) -> Vec<usize> {
        self.records.iter().filter_map(|r| r.tau_hat).collect()
    }

    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &ExperimentReport) -> bool {
        ExperimentReport { runtime_secs: 0.0, ..self.clone() } == ExperimentReport { runtime_secs: 0.0, ..other.clone() }
    }

    pub const CSV_HEADER: [&'static str; 16] = [
        "kind", "model", "scheme", "gamma", "alpha", "m", "T_m", "k0", "reps", "n_valid", "rate", "tau_min",
        "tau_median", "tau_mean", "tau_q3", "tau_max",
    ];

    /// One table row matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> Vec<String> {
        let s = &self.scenario;
        let scheme = match s.scheme {
            SchemePlan::Asymptotic { .. } => "asymptotic",
            SchemePlan::Bootstrap { .. } => "bootstrap",
        };
        let kind = match self.kind {
            ExperimentKind::Size => "size",
            ExperimentKind::Power => "power",
        };
        let t = self.tau_summary;
        let opt = |v: Option<String>| v.unwrap_or_default();
        vec![
            kind.into(),
            s.model.clone(),
            scheme.into(),
            s.gamma.to_string(),
            s.alpha.to_string(),
            s.m.to_string(),
            s.t_m.to_string(),
            opt(s.k0.map(|k| k.to_string())),
            s.reps.to_string(),
            self.n_valid.to_string(),
            self.rate.to_string(),
            opt(t.map(|t| t.min.to_string())),
            opt(t.map(|t| t.median.to_string())),
            opt(t.map(|t| t.mean.to_string())),
            opt(t.map(|t| t.q3.to_string())),
            opt(t.map(|t| t.max.to_string())),
        ]
    }
}

fn run_experiment(scenario: &Scenario, kind: ExperimentKind) -> Result<ExperimentReport> {
    let model = scenario.validate()?;
    let start = Instant::now();
    let records: Vec<RepRecord> = (0..scenario.reps)
        .into_par_iter()
        .map(|rep| run_rep(scenario, &model, rep))
        .collect();
    let valid: Vec<&RepRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let n_valid = valid.len();
    let n_failed = records.len() - n_valid;
    let taus: Vec<usize> = valid.iter().filter_map(|r| r.tau_hat).collect();
    let rate = if n_valid == 0 { f64::NAN } else { taus.len() as f64 / n_valid as f64 };
    let tau_summary = summarize_tau(&taus).ok();
    Ok(ExperimentReport {
        kind,
        scenario: scenario.clone(),
        rate,
        n_valid,
        n_failed,
        n_no_detect: n_valid - taus.len(),
        tau_summary,
        runtime_secs: start.elapsed().as_secs_f64(),
        records,
    })
}

/// Empirical size: the scenario must have no change point.
pub fn run_size_experiment(scenario: &Scenario) -> Result<ExperimentReport> {
    if scenario.k0.is_some() {
        return Err(Error::InvalidConfig("a size experiment needs k0 = None".into()));
    }
    run_experiment(scenario, ExperimentKind::Size)
}

/// Empirical power and detection times: the scenario must have a change point.
pub fn run_power_experiment(scenario: &Scenario) -> Result<ExperimentReport> {
    if scenario.k0.is_none() {
        return Err(Error::InvalidConfig("a power experiment needs a change index k0".into()));
    }
    run_experiment(scenario, ExperimentKind::Power)
}
