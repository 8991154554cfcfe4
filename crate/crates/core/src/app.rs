//! Command-line front end: `calibrate`, `monitor` and `simulate`.
//!
//! Exit codes: 0 success (or alarm for `monitor`), 4 no alarm by the end of
//! the stream, 2 invalid input, 3 numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::asymptotic::{critical_value_form, CalibrationResult, LimitForm, LimitHorizon, DEFAULT_GRID, DEFAULT_REPLICATIONS};
use crate::bootstrap::{self, critical_value_schedule, BootstrapConfig, BootstrapCriticalValues, Mixing};
use crate::detector::{DetectorState, Horizon, MonitorConfig, Scheme};
use crate::error::{Error, Result};
use crate::harness::{run_power_experiment, run_size_experiment, ExperimentReport, Scenario, SchemePlan};
use crate::io::{read_json, read_observations_path, write_json, Provenance};
use crate::model::{default_beta0, ModelSpec};
use crate::moments::{gaussian_moments, GaussianRegressorLaw, DEFAULT_NODES};
use crate::nls::{fit_nls, residual, FitOptions, Observation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_NO_ALARM: i32 = 4;

pub const SEED_ENV: &str = "SEQBREAK_SEED";

#[derive(Debug, Parser, Serialize)]
#[command(name = "seqbreak", version, about = "Sequential change-point monitoring for nonlinear regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Compute critical values and write them as JSON.
    Calibrate(CalibrateArgs),
    /// Fit the history, then monitor a stream, one JSON line per observation.
    Monitor(MonitorArgs),
    /// Run a Monte-Carlo size or power experiment.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    Asymptotic,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum HorizonArg {
    Open,
    Closed,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long, value_enum, default_value = "asymptotic")]
    pub scheme: SchemeArg,
    #[arg(long, default_value = "growth")]
    pub model: String,
    /// Pre-change parameter, comma separated (defaults per model).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub beta0: Option<Vec<f64>>,
    /// Variance of the Gaussian regressor.
    #[arg(long = "sigma2x", default_value_t = 1.0)]
    pub sigma2_x: f64,
    /// Use this D instead of computing it from the model.
    #[arg(long = "D")]
    pub d: Option<f64>,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "open")]
    pub horizon: HorizonArg,
    /// Closed-end ratio T = T_m / m.
    #[arg(long = "T")]
    pub t: Option<f64>,
    /// Monte-Carlo replications (50000 asymptotic, 2000 bootstrap by default).
    #[arg(long = "M")]
    pub replications: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    pub n_grid: usize,
    /// Version of the limit law used for asymptotic critical values.
    #[arg(long, value_enum, default_value = "theorem")]
    pub limit_form: LimitForm,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Stream prefix used for the block refits.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    /// Block length.
    #[arg(long = "L")]
    pub block_len: Option<usize>,
    /// Mixing window in blocks; omit to mix every completed block.
    #[arg(long = "N")]
    pub window: Option<usize>,
    #[arg(long = "T-m")]
    pub t_m: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MonitorArgs {
    #[arg(long, default_value = "growth")]
    pub model: String,
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    /// Critical-value file written by `calibrate`.
    #[arg(long)]
    pub critical: PathBuf,
    /// Must match the critical-value file when given.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value = "growth")]
    pub model: String,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub beta0: Option<Vec<f64>>,
    /// Post-change parameter; defaults to beta0.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub beta1: Option<Vec<f64>>,
    #[arg(long = "sigma2-eps", default_value_t = 0.5)]
    pub sigma2_eps: f64,
    #[arg(long = "sigma2x", default_value_t = 1.0)]
    pub sigma2_x: f64,
    #[arg(long)]
    pub m: usize,
    #[arg(long = "T-m", alias = "Tm")]
    pub t_m: usize,
    /// Change index; omit for a size experiment.
    #[arg(long)]
    pub k0: Option<usize>,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub reps: usize,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "asymptotic")]
    pub scheme: SchemeArg,
    /// Asymptotic critical value; calibrated from the model when absent.
    #[arg(long)]
    pub c_alpha: Option<f64>,
    /// Replications for the on-the-fly calibration (asymptotic or bootstrap).
    #[arg(long = "M")]
    pub replications: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    pub n_grid: usize,
    /// Version of the limit law used for asymptotic critical values.
    #[arg(long, value_enum, default_value = "theorem")]
    pub limit_form: LimitForm,
    #[arg(long = "L")]
    pub block_len: Option<usize>,
    #[arg(long = "N")]
    pub window: Option<usize>,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a one-row CSV summary here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Critical values on disk, tagged by scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum CriticalFile {
    Asymptotic {
        model: Option<String>,
        #[serde(flatten)]
        result: CalibrationResult,
        provenance: Provenance,
    },
    Bootstrap {
        model: String,
        #[serde(flatten)]
        result: BootstrapCriticalValues,
        provenance: Provenance,
    },
}

/// Emitted once, at the first crossing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub k: usize,
    pub gamma_stat: f64,
    pub threshold: f64,
    pub sigma_hat: f64,
    /// Position of the triggering row among the ingested stream rows.
    pub ingestion_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MonitorLine {
    Fit {
        m: usize,
        beta_hat: Vec<f64>,
        sigma_hat: f64,
        provenance: Provenance,
    },
    Step {
        k: usize,
        gamma_stat: f64,
        z_running: f64,
        alarm: bool,
    },
    Alarm(AlarmRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: ExperimentReport,
    pub provenance: Provenance,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// Exit code for a failed command.
pub fn error_exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_VALIDATION
    }
}

/// Runs a parsed command, writing primary output to `out`; returns the exit code.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Calibrate(args) => cmd_calibrate(args, out),
        Command::Monitor(args) => cmd_monitor(args, out),
        Command::Simulate(args) => cmd_simulate(args, out),
    }
}

fn require_seed(seed: Option<u64>) -> Result<u64> {
    seed.ok_or_else(|| invalid(format!("a seed is required (--seed or {SEED_ENV})")))
}

fn resolve_beta0(model: &ModelSpec, beta0: &Option<Vec<f64>>) -> Result<Vec<f64>> {
    let beta = match beta0 {
        Some(b) => b.clone(),
        None => default_beta0(model)
            .ok_or_else(|| invalid(format!("model '{}' has no default beta0; pass --beta0", model.name())))?,
    };
    model.check_beta(&beta)?;
    Ok(beta)
}

/// `D` for a model at `beta0` with regressor variance `sigma2_x`.
pub fn model_d(model: &ModelSpec, beta0: &[f64], sigma2_x: f64) -> Result<f64> {
    let law = GaussianRegressorLaw::new(sigma2_x)?;
    Ok(gaussian_moments(model, &law, beta0, DEFAULT_NODES)?.d)
}

fn emit_json<T: Serialize>(path: &Option<PathBuf>, value: &T, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => write_json(p, value),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(|e| invalid(e.to_string()))?;
            writeln!(out, "{text}").map_err(|e| invalid(e.to_string()))
        }
    }
}

fn limit_horizon(horizon: HorizonArg, t: Option<f64>) -> Result<LimitHorizon> {
    match (horizon, t) {
        (HorizonArg::Open, None) => Ok(LimitHorizon::OpenEnd),
        (HorizonArg::Open, Some(_)) => Err(invalid("--T only applies to --horizon closed")),
        (HorizonArg::Closed, Some(t)) => Ok(LimitHorizon::ClosedEnd { t }),
        (HorizonArg::Closed, None) => Err(invalid("--horizon closed needs --T")),
    }
}

fn cmd_calibrate(args: &CalibrateArgs, out: &mut dyn Write) -> Result<i32> {
    let seed = require_seed(args.seed)?;
    let model = ModelSpec::by_name(&args.model)?;
    let provenance = Provenance::new(Some(seed), args)?;
    let file = match args.scheme {
        SchemeArg::Asymptotic => {
            let horizon = limit_horizon(args.horizon, args.t)?;
            let d = match args.d {
                Some(d) => d,
                None => model_d(&model, &resolve_beta0(&model, &args.beta0)?, args.sigma2_x)?,
            };
            let reps = args.replications.unwrap_or(DEFAULT_REPLICATIONS);
            let result = critical_value_form(args.gamma, args.alpha, d, horizon, args.limit_form, reps, args.n_grid, seed)?;
            CriticalFile::Asymptotic {
                model: args.d.is_none().then(|| args.model.clone()),
                result,
                provenance,
            }
        }
        SchemeArg::Bootstrap => {
            let need = |name: &str| invalid(format!("--scheme bootstrap needs {name}"));
            let history = read_observations_path(args.history.as_deref().ok_or_else(|| need("--history"))?)?;
            let stream = match &args.stream {
                Some(p) => read_observations_path(p)?,
                None => Vec::new(),
            };
            check_dims(&model, &history)?;
            check_dims(&model, &stream)?;
            let config = BootstrapConfig {
                block_len: args.block_len.ok_or_else(|| need("--L"))?,
                mixing: args.window.map_or(Mixing::AllBlocks, Mixing::Window),
                replications: args.replications.unwrap_or(bootstrap::DEFAULT_REPLICATIONS),
                alpha: args.alpha,
                gamma: args.gamma,
                t_m: args.t_m.ok_or_else(|| need("--T-m"))?,
                seed,
            };
            config.validate()?;
            let fit = fit_nls(&history, &model, &FitOptions::default())?;
            let result = critical_value_schedule(&history, &stream, &model, &fit, &config)?;
            CriticalFile::Bootstrap {
                model: args.model.clone(),
                result,
                provenance,
            }
        }
    };
    emit_json(&args.out, &file, out)?;
    Ok(EXIT_OK)
}

fn check_dims(model: &ModelSpec, data: &[Observation]) -> Result<()> {
    match data.iter().find(|o| o.x.len() != model.p()) {
        Some(o) => Err(invalid(format!(
            "model '{}' takes {} regressor column(s), file has {}",
            model.name(),
            model.p(),
            o.x.len()
        ))),
        None => Ok(()),
    }
}

fn check_matches(name: &str, flag: Option<f64>, recorded: f64) -> Result<()> {
    match flag {
        Some(v) if v != recorded => Err(invalid(format!(
            "--{name} {v} does not match the critical-value file ({recorded})"
        ))),
        _ => Ok(()),
    }
}

fn write_line(out: &mut dyn Write, line: &MonitorLine) -> Result<()> {
    let text = serde_json::to_string(line).map_err(|e| invalid(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| invalid(e.to_string()))
}

fn cmd_monitor(args: &MonitorArgs, out: &mut dyn Write) -> Result<i32> {
    let model = ModelSpec::by_name(&args.model)?;
    let critical: CriticalFile = read_json(&args.critical)?;
    let history = read_observations_path(&args.history)?;
    let stream = read_observations_path(&args.stream)?;
    check_dims(&model, &history)?;
    check_dims(&model, &stream)?;
    let m = history.len();

    let (gamma, alpha, horizon, scheme) = match &critical {
        CriticalFile::Asymptotic { model: recorded, result, .. } => {
            if let Some(name) = recorded {
                if name != model.name() {
                    return Err(invalid(format!("critical values were built for model '{name}'")));
                }
            }
            let horizon = match result.horizon {
                LimitHorizon::OpenEnd => Horizon::OpenEnd,
                LimitHorizon::ClosedEnd { t } => Horizon::ClosedEnd((t * m as f64).round().max(1.0) as usize),
            };
            (result.gamma, result.alpha, horizon, Scheme::Asymptotic(result.c_alpha))
        }
        CriticalFile::Bootstrap { model: recorded, result, .. } => {
            if recorded != model.name() {
                return Err(invalid(format!("critical values were built for model '{recorded}'")));
            }
            if result.m != m {
                return Err(invalid(format!(
                    "critical values were built for m = {}, history has {m} rows",
                    result.m
                )));
            }
            (result.gamma, result.alpha, Horizon::ClosedEnd(result.t_m), Scheme::Bootstrap(result.c_k.clone()))
        }
    };
    check_matches("gamma", args.gamma, gamma)?;
    check_matches("alpha", args.alpha, alpha)?;
    if let Some(t_m) = horizon.limit() {
        if stream.len() > t_m {
            return Err(invalid(format!("stream has {} rows, beyond the horizon T_m = {t_m}", stream.len())));
        }
    }
    let config = MonitorConfig::new(gamma, alpha, horizon, scheme)?;

    // the detector itself never inverts B_m
    let fit = fit_nls(&history, &model, &FitOptions::default().without_moment_check())?;
    let sigma_hat = fit.sigma_hat();
    if !(sigma_hat > 0.0) {
        return Err(Error::DegenerateWindow { n: m, q: model.q() });
    }
    write_line(
        out,
        &MonitorLine::Fit {
            m,
            beta_hat: fit.beta_hat.clone(),
            sigma_hat,
            provenance: Provenance::new(None, args)?,
        },
    )?;

    let mut state = DetectorState::new();
    for (i, obs) in stream.iter().enumerate() {
        let next = state.step(residual(obs, &model, &fit.beta_hat), m, sigma_hat, &config)?;
        write_line(
            out,
            &MonitorLine::Step {
                k: next.k,
                gamma_stat: next.gamma_stat,
                z_running: next.z_running,
                alarm: next.alarm,
            },
        )?;
        if next.alarm && !state.alarm {
            write_line(
                out,
                &MonitorLine::Alarm(AlarmRecord {
                    k: next.k,
                    gamma_stat: next.gamma_stat,
                    threshold: config.threshold_at(next.k),
                    sigma_hat,
                    ingestion_index: i + 1,
                }),
            )?;
        }
        state = next;
    }
    Ok(if state.alarm { EXIT_OK } else { EXIT_NO_ALARM })
}

/// Builds the scenario described by the `simulate` flags, calibrating the
/// asymptotic constant when none is given.
pub fn build_scenario(args: &SimulateArgs) -> Result<Scenario> {
    let seed = require_seed(args.seed)?;
    let model = ModelSpec::by_name(&args.model)?;
    let beta0 = resolve_beta0(&model, &args.beta0)?;
    let beta1 = args.beta1.clone().unwrap_or_else(|| beta0.clone());
    if args.reps == 0 {
        return Err(invalid("--reps must be at least 1"));
    }
    let scheme = match args.scheme {
        SchemeArg::Asymptotic => {
            let c_alpha = match args.c_alpha {
                Some(c) => c,
                None => {
                    let d = model_d(&model, &beta0, args.sigma2_x)?;
                    let reps = args.replications.unwrap_or(DEFAULT_REPLICATIONS);
                    critical_value_form(args.gamma, args.alpha, d, LimitHorizon::OpenEnd, args.limit_form, reps, args.n_grid, seed)?.c_alpha
                }
            };
            SchemePlan::Asymptotic { c_alpha }
        }
        SchemeArg::Bootstrap => SchemePlan::Bootstrap {
            block_len: args.block_len.ok_or_else(|| invalid("--scheme bootstrap needs --L"))?,
            window: args.window,
            replications: args.replications.unwrap_or(bootstrap::DEFAULT_REPLICATIONS),
        },
    };
    let scenario = Scenario {
        model: args.model.clone(),
        beta0,
        beta1,
        sigma2_eps: args.sigma2_eps,
        sigma2_x: args.sigma2_x,
        m: args.m,
        t_m: args.t_m,
        k0: args.k0,
        gamma: args.gamma,
        alpha: args.alpha,
        scheme,
        reps: args.reps,
        seed,
    };
    scenario.validate()?;
    Ok(scenario)
}

fn write_report_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let err = |e: csv::Error| invalid(format!("{}: {e}", path.display()));
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(err)?;
    wtr.write_record(ExperimentReport::CSV_HEADER).map_err(err)?;
    wtr.write_record(report.csv_row()).map_err(err)?;
    wtr.flush().map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<i32> {
    let scenario = build_scenario(args)?;
    let report = if scenario.k0.is_some() {
        run_power_experiment(&scenario)?
    } else {
        run_size_experiment(&scenario)?
    };
    let file = ReportFile {
        provenance: Provenance::new(Some(scenario.seed), &scenario)?,
        report,
    };
    emit_json(&args.out, &file, out)?;
    if let Some(path) = &args.csv {
        write_report_csv(path, &file.report)?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("seqbreak").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn calibrate_writes_json() {
        let cli = parse(&[
            "calibrate", "--model", "growth", "--gamma", "0.1", "--alpha", "0.1", "--M", "2000", "--n-grid", "256",
            "--seed", "5",
        ]);
        let mut buf = Vec::new();
        assert_eq!(run(&cli, &mut buf).unwrap(), EXIT_OK);
        let file: CriticalFile = serde_json::from_slice(&buf).unwrap();
        match file {
            CriticalFile::Asymptotic { result, provenance, model } => {
                assert!((result.d - 1.0).abs() < 1e-9);
                assert!(result.c_alpha > 1.0 && result.c_alpha < 4.0);
                assert_eq!(provenance.seed, Some(5));
                assert_eq!(model.as_deref(), Some("growth"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_failures_map_to_exit_2() {
        let cli = parse(&["calibrate", "--gamma", "0", "--alpha", "1.0", "--M", "2000", "--seed", "1"]);
        let err = run(&cli, &mut Vec::new()).unwrap_err();
        assert_eq!(error_exit_code(&err), EXIT_VALIDATION);

        let cli = parse(&["simulate", "--m", "25", "--T-m", "50", "--gamma", "0", "--alpha", "0.05", "--reps", "0",
            "--c-alpha", "2", "--seed", "1"]);
        assert_eq!(error_exit_code(&run(&cli, &mut Vec::new()).unwrap_err()), EXIT_VALIDATION);
    }

    #[test]
    fn numeric_failures_map_to_exit_3() {
        assert_eq!(error_exit_code(&Error::SingularMoments { cond: 1e20 }), EXIT_NUMERIC);
        assert_eq!(error_exit_code(&Error::DegenerateBootstrap("x".into())), EXIT_NUMERIC);
        assert_eq!(error_exit_code(&Error::NoConvergence { iterations: 1, grad_norm: 1.0 }), EXIT_NUMERIC);
    }

    #[test]
    fn critical_file_round_trips() {
        let file = CriticalFile::Bootstrap {
            model: "growth".into(),
            result: BootstrapCriticalValues {
                m: 25,
                t_m: 3,
                block_len: 1,
                window: None,
                replications: 10,
                alpha: 0.05,
                gamma: 0.25,
                seed: u64::MAX,
                c_k: vec![1.0, 2.0, 3.5],
                blocks: Vec::new(),
            },
            provenance: Provenance::new(Some(u64::MAX), &"cfg").unwrap(),
        };
        let text = serde_json::to_string(&file).unwrap();
        assert!(text.contains("\"scheme\":\"bootstrap\""));
        assert_eq!(serde_json::from_str::<CriticalFile>(&text).unwrap(), file);
    }

    #[test]
    fn simulate_sentinel_threshold_gives_zero_size() {
        let cli = parse(&[
            "simulate", "--m", "25", "--T-m", "50", "--gamma", "0.25", "--alpha", "0.05", "--reps", "20",
            "--c-alpha", "1e308", "--seed", "3",
        ]);
        let mut buf = Vec::new();
        assert_eq!(run(&cli, &mut buf).unwrap(), EXIT_OK);
        let file: ReportFile = serde_json::from_slice(&buf).unwrap();
        assert_eq!(file.report.empirical_size(), Some(0.0));
    }
}
