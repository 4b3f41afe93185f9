//! `fracdrift` command-line front end: simulate paths, estimate drift
//! parameters from observation CSVs, and run experiment campaigns.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use fracdrift::estimate::{closed_form_fou, estimate_h_sigma, zero_squares_with, EstimationError};
use fracdrift::fgn::HurstIndex;
use fracdrift::harness::{run_all, HarnessError};
use fracdrift::models::{model_by_name, DriftModel, ModelError, NoiseModel, ParameterBox};
use fracdrift::pathio::{read_observations, write_path, Encoding, PathIoError};
use fracdrift::simulate::{default_burn_in, simulate_path, ObservationScheme, SimulationError, SimulationPlan};
use fracdrift::statistic::{NoiseLevel, StatisticInput};
use log::{info, warn};
use serde_json::json;
use thiserror::Error;

use crate::config::{keys_help, Settings};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Simulation(String),
    #[error("{0}")]
    Estimation(String),
    #[error("one or more experiments failed")]
    Failed,
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Simulation(_) => 3,
            CliError::Estimation(_) => 4,
            CliError::Failed => 5,
        }
    }
}

fn model_err(key: &str, e: ModelError) -> CliError {
    CliError::Validation(format!("{key}: {e}"))
}

fn sim_err(e: SimulationError) -> CliError {
    match e {
        SimulationError::NonFinite { .. } | SimulationError::Fgn(_) => CliError::Simulation(e.to_string()),
        SimulationError::InvalidScheme(_) => CliError::Validation(format!("scheme: {e}")),
        SimulationError::InvalidPlan(_) => CliError::Validation(format!("scheme: {e}")),
        SimulationError::Model(m) => model_err("model", m),
    }
}

impl From<PathIoError> for CliError {
    fn from(e: PathIoError) -> Self {
        match e {
            PathIoError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::Simulation(s) => sim_err(s),
            other => CliError::Estimation(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig { .. } | HarnessError::ConfigMismatch { .. } => CliError::Validation(e.to_string()),
            HarnessError::Model(m) => model_err("model", m),
            HarnessError::Io { .. } | HarnessError::Pool(_) => CliError::Io(e.to_string()),
            HarnessError::Simulation(s) => sim_err(s),
            HarnessError::Fgn(_) => CliError::Simulation(e.to_string()),
            HarnessError::Estimation(e) => e.into(),
        }
    }
}

#[derive(Parser)]
#[command(name = "fracdrift", version, about = "Drift estimation for SDEs driven by fractional Brownian motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one path and write it as CSV with a JSON sidecar.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output CSV path.
        #[arg(long, default_value = "path.csv")]
        out: PathBuf,
        /// Write values as hexadecimal floats (bit-exact).
        #[arg(long)]
        hex: bool,
        /// Also write the fine Euler grid.
        #[arg(long)]
        keep_fine: bool,
    },
    /// Estimate the drift parameter from an observation CSV; prints JSON.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Observation CSV (`t,y1..yd[,F1..Fd]`).
        #[arg(long)]
        data: PathBuf,
        /// Also compute the explicit fOU estimator (d = 1).
        #[arg(long)]
        closed_form: bool,
        /// Estimate (H, |sigma|^2) from the data first.
        #[arg(long)]
        estimate_h: bool,
    },
    /// Run the configured experiments and print a PASS/FAIL line for each.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Campaign output directory (experiment.outdir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Experiments to run (experiment.list).
        #[arg(long)]
        experiments: Option<String>,
    },
}

/// Options shared by all subcommands; each maps onto a config key.
#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set scheme.alpha=0.6 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// model.name
    #[arg(long)]
    model: Option<String>,
    /// model.dim
    #[arg(long)]
    dim: Option<usize>,
    /// model.theta0 (comma list)
    #[arg(long, allow_hyphen_values = true)]
    theta0: Option<String>,
    /// model.box_lower (comma list)
    #[arg(long, allow_hyphen_values = true)]
    box_lower: Option<String>,
    /// model.box_upper (comma list)
    #[arg(long, allow_hyphen_values = true)]
    box_upper: Option<String>,
    /// model.y0 (comma list)
    #[arg(long, allow_hyphen_values = true)]
    y0: Option<String>,
    /// noise.h
    #[arg(long, allow_hyphen_values = true)]
    h: Option<String>,
    /// noise.sigma
    #[arg(long, allow_hyphen_values = true)]
    sigma: Option<String>,
    /// scheme.n (comma list for experiments)
    #[arg(long)]
    n: Option<String>,
    /// scheme.alpha
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<String>,
    /// scheme.kappa
    #[arg(long, allow_hyphen_values = true)]
    kappa: Option<String>,
    /// scheme.substeps
    #[arg(long)]
    substeps: Option<String>,
    /// scheme.burn_in
    #[arg(long, allow_hyphen_values = true)]
    burn_in: Option<String>,
    /// experiment.seed
    #[arg(long)]
    seed: Option<String>,
    /// experiment.workers
    #[arg(long)]
    workers: Option<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings, CliError> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.load(path)?;
        }
        for pair in &self.overrides {
            s.set_pair(pair)?;
        }
        s.set_opt("model.name", self.model.as_ref());
        s.set_opt("model.dim", self.dim);
        s.set_opt("model.theta0", self.theta0.as_ref());
        s.set_opt("model.box_lower", self.box_lower.as_ref());
        s.set_opt("model.box_upper", self.box_upper.as_ref());
        s.set_opt("model.y0", self.y0.as_ref());
        s.set_opt("noise.h", self.h.as_ref());
        s.set_opt("noise.sigma", self.sigma.as_ref());
        s.set_opt("scheme.n", self.n.as_ref());
        s.set_opt("scheme.alpha", self.alpha.as_ref());
        s.set_opt("scheme.kappa", self.kappa.as_ref());
        s.set_opt("scheme.substeps", self.substeps.as_ref());
        s.set_opt("scheme.burn_in", self.burn_in.as_ref());
        s.set_opt("experiment.seed", self.seed.as_ref());
        s.set_opt("experiment.workers", self.workers.as_ref());
        Ok(s)
    }
}

fn build_model(s: &Settings) -> Result<Arc<dyn DriftModel>, CliError> {
    let name = s.require("model.name", s.raw("model.name"))?;
    let bounds = match (s.f64_list("model.box_lower")?, s.f64_list("model.box_upper")?) {
        (Some(lo), Some(hi)) => Some(ParameterBox::new(lo, hi).map_err(|e| model_err("model.box_lower/box_upper", e))?),
        (None, None) => None,
        _ => return Err(CliError::Validation("model.box_lower/box_upper: give both bounds".into())),
    };
    model_by_name(name, s.usize("model.dim")?, bounds).map_err(|e| match e {
        ModelError::UnknownModelName(_) => model_err("model.name", e),
        ModelError::InvalidDimension(_) => model_err("model.dim", e),
        other => model_err("model", other),
    })
}

fn noise_model(s: &Settings, dim: usize) -> Result<NoiseModel, CliError> {
    let h = s.require("noise.h", s.f64("noise.h")?)?;
    let h = HurstIndex::new(h).map_err(|e| CliError::Validation(format!("noise.h: {e}")))?;
    let sigma = s.f64("noise.sigma")?.unwrap_or(1.0);
    NoiseModel::isotropic(h, sigma, dim).map_err(|e| model_err("noise.sigma", e))
}

fn single_n(s: &Settings) -> Result<usize, CliError> {
    match s.require("scheme.n", s.usize_list("scheme.n")?)?.as_slice() {
        [n] => Ok(*n),
        _ => Err(CliError::Validation("scheme.n: give a single value".into())),
    }
}

fn cmd_simulate(common: &Common, out: PathBuf, hex: bool, keep_fine: bool) -> Result<(), CliError> {
    let s = common.settings()?;
    let model = build_model(&s)?;
    let theta0 = s.require("model.theta0", s.f64_list("model.theta0")?)?;
    model.param_box().check(&theta0).map_err(|e| model_err("model.theta0", e))?;
    let noise = noise_model(&s, model.dim())?;
    let n = single_n(&s)?;
    let scheme = ObservationScheme::new(n, s.f64("scheme.alpha")?.unwrap_or(0.5), s.f64("scheme.kappa")?.unwrap_or(1.0))
        .map_err(sim_err)?;
    let y0 = s.f64_list("model.y0")?.unwrap_or_else(|| vec![0.0; model.dim()]);
    if y0.len() != model.dim() {
        return Err(CliError::Validation(format!("model.y0: needs {} entries", model.dim())));
    }
    let burn_in = match s.f64("scheme.burn_in")? {
        Some(b) => b,
        None => default_burn_in(model.as_ref(), &theta0),
    };
    let mut plan = SimulationPlan::new(scheme, y0, s.u64("experiment.seed")?.unwrap_or(0)).with_burn_in(burn_in);
    if let Some(m) = s.usize("scheme.substeps")? {
        plan = plan.with_substeps(m);
    }
    if keep_fine {
        plan = plan.keeping_fine();
    }
    info!("simulating {} with n = {n}, burn-in {burn_in}", model.name());
    let record = simulate_path(model.as_ref(), &theta0, &noise, &plan).map_err(sim_err)?;
    let encoding = if hex { Encoding::HexFloat } else { Encoding::Decimal };
    write_path(&record, &out, encoding)?;
    println!("wrote {}", out.display());
    println!("n = {n}");
    println!("T_n = {}", scheme.horizon());
    println!("alpha_n = {}", scheme.alpha_n());
    for (i, row) in record.obs_y.rows().into_iter().enumerate() {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("y{}: min = {lo}, max = {hi}", i + 1);
    }
    Ok(())
}

/// Scheme implied by equally spaced observation times.
fn scheme_from_times(times: &[f64], alpha: f64) -> Result<ObservationScheme, CliError> {
    if times.len() < 2 {
        return Err(CliError::Validation("data: need at least two observations".into()));
    }
    let n = times.len() - 1;
    let spacing = (times[n] - times[0]) / n as f64;
    for (k, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - spacing).abs() > 1e-9 * spacing.max(1.0) {
            return Err(CliError::Validation(format!(
                "data: observation times are not equally spaced (row {})",
                k + 2
            )));
        }
    }
    ObservationScheme::with_spacing(n, alpha, spacing).map_err(sim_err)
}

fn cmd_estimate(common: &Common, data: PathBuf, closed_form: bool, estimate_h: bool) -> Result<(), CliError> {
    let s = common.settings()?;
    let model = build_model(&s)?;
    let table = read_observations(&data)?;
    if table.y.nrows() != model.dim() {
        return Err(CliError::Validation(format!(
            "data: {} state columns, model {} has dimension {}",
            table.y.nrows(),
            model.name(),
            model.dim()
        )));
    }
    let scheme = scheme_from_times(&table.times, s.f64("scheme.alpha")?.unwrap_or(0.5))?;
    let plug_in = estimate_h || s.bool("noise.estimate")?.unwrap_or(false);
    let (noise, h_sigma) = if plug_in {
        let est = estimate_h_sigma(table.y.view(), &scheme)?;
        (est.noise_level(), Some(est))
    } else {
        (NoiseLevel::from(&noise_model(&s, model.dim())?), None)
    };
    let opts = s.search_options()?;
    let input = StatisticInput::new(model.as_ref(), table.y.view(), scheme, noise)
        .map_err(|e| CliError::Validation(format!("data: {e}")))?;
    let result = zero_squares_with(&input, model.param_box(), &opts)?;
    let mut out = json!({
        "model": model.name(),
        "n": scheme.n(),
        "alpha_n": scheme.alpha_n(),
        "plug_in": plug_in,
        "zero_squares": result,
    });
    if let Some(est) = h_sigma {
        out["h_sigma"] = json!(est);
    }
    if closed_form {
        if model.name() != "fou" || model.dim() != 1 {
            return Err(CliError::Validation("--closed-form needs model.name = fou with d = 1".into()));
        }
        let cf = closed_form_fou(table.y.view(), &scheme, &noise)?;
        if cf.plus_root_admissible(model.param_box()) {
            warn!("both roots lie in the parameter box; reporting the minus root {}", cf.theta_hat);
        }
        out["closed_form"] = json!(cf);
        out["closed_form_gap"] = json!((cf.theta_hat - result.theta_hat[0]).abs());
    }
    println!("{out}");
    Ok(())
}

fn cmd_experiment(common: &Common, out: Option<PathBuf>, experiments: Option<String>) -> Result<(), CliError> {
    let mut s = common.settings()?;
    s.set_opt("experiment.outdir", out.map(|p| p.display().to_string()));
    s.set_opt("experiment.list", experiments);
    let config = s.experiment_config()?;
    let verdicts = run_all(&config)?;
    let mut all = true;
    for v in &verdicts {
        println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.experiment, v.detail);
        all &= v.pass;
    }
    if all {
        Ok(())
    } else {
        Err(CliError::Failed)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let help = keys_help();
    let command = Cli::command()
        .after_long_help(help.clone())
        .mut_subcommand("simulate", |c| c.after_long_help(help.clone()))
        .mut_subcommand("estimate", |c| c.after_long_help(help.clone()))
        .mut_subcommand("experiment", |c| c.after_long_help(help.clone()));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Simulate { common, out, hex, keep_fine } => cmd_simulate(&common, out, hex, keep_fine),
        Command::Estimate {
            common,
            data,
            closed_form,
            estimate_h,
        } => cmd_estimate(&common, data, closed_form, estimate_h),
        Command::Experiment { common, out, experiments } => cmd_experiment(&common, out, experiments),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::Failed) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.code())
        }
    }
}
