//! Flat `key = value` configuration with `#` comments.
//!
//! Keys live in four namespaces (`model.*`, `noise.*`, `scheme.*`,
//! `experiment.*`). Unknown keys are rejected. Later sources override
//! earlier ones: config file, then `--set`, then dedicated flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fracdrift::harness::{ExperimentConfig, ExperimentKind, LimitSettings, QvSettings, Thresholds};
use fracdrift::optim::SearchOptions;
use fracdrift::simulate::OracleParams;

use crate::CliError;

pub struct KeySpec {
    pub key: &'static str,
    pub unit: &'static str,
    pub help: &'static str,
}

const fn k(key: &'static str, unit: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, unit, help }
}

/// Every accepted key. Time-like quantities share one abstract time unit.
pub const KEYS: &[KeySpec] = &[
    k("model.name", "-", "drift family: fou, fou-multi, langevin-quartic"),
    k("model.dim", "-", "state dimension d (fou-multi, langevin-quartic)"),
    k("model.box_lower", "param", "comma list, lower corner of the parameter box"),
    k("model.box_upper", "param", "comma list, upper corner of the parameter box"),
    k("model.theta0", "param", "comma list, true drift parameter"),
    k("model.y0", "state", "comma list, initial state before burn-in (default 0)"),
    k("noise.h", "-", "Hurst index in (0, 1)"),
    k("noise.sigma", "state/time^H", "isotropic noise scale, sigma = s * I_d"),
    k("noise.estimate", "bool", "estimate (H, |sigma|^2) from the data (plug-in mode)"),
    k("scheme.n", "-", "number of observation gaps; comma list for experiments"),
    k("scheme.alpha", "-", "spacing exponent in (0, 1): alpha_n = kappa * n^-alpha"),
    k("scheme.kappa", "time", "spacing prefactor"),
    k("scheme.substeps", "-", "Euler steps per observation gap (default 8)"),
    k("scheme.burn_in", "time", "simulated time discarded before t = 0 (default 10/c1)"),
    k("experiment.seed", "-", "base seed (also --seed)"),
    k("experiment.list", "-", "comma list of consistency, limit, qv-rates"),
    k("experiment.replications", "-", "replications per n"),
    k("experiment.outdir", "path", "campaign output directory"),
    k("experiment.workers", "-", "worker threads (default: available parallelism)"),
    k("experiment.tolerance", "param", "error counted as a success"),
    k("experiment.min_fraction_within", "fraction", "required success share at the largest n"),
    k("experiment.strict_decrease", "bool", "require strictly decreasing medians"),
    k("experiment.regime_fraction", "fraction", "required share matching the limit's sign and curvature"),
    k("experiment.slope_tol", "-", "allowed QV slope deviation"),
    k("experiment.theta_points", "-", "grid points per axis in the limit comparison"),
    k("experiment.contrast_h", "-", "second Hurst index for the limit comparison"),
    k("experiment.sign_margin", "fraction", "ignore grid points with |L| below this share of max |L|"),
    k("experiment.oracle_horizon", "time", "length of each stationary oracle trajectory"),
    k("experiment.oracle_substeps", "1/time", "oracle Euler steps per time unit"),
    k("experiment.oracle_seeds", "-", "independent oracle trajectories"),
    k("experiment.qv_h", "-", "comma list of Hurst indices for qv-rates"),
    k("experiment.qv_n", "-", "comma list of sequence lengths for qv-rates"),
    k("experiment.qv_replications", "-", "replications per (H, n) in qv-rates"),
    k("experiment.grid_points", "-", "estimator grid points per axis (default 33)"),
    k("experiment.tol", "fraction of box", "simplex diameter at which refinement stops"),
    k("experiment.max_iter", "-", "refinement iteration cap"),
];

pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (config file lines `key = value`, or --set key=value):\n");
    for spec in KEYS {
        s.push_str(&format!("  {:<32} [{}] {}\n", spec.key, spec.unit, spec.help));
    }
    s.push_str("\nTimes, kappa and alpha_n share one abstract time unit.\n");
    s.push_str("Exit codes: 0 ok, 1 I/O, 2 validation, 3 simulation, 4 estimation, 5 experiment FAIL.\n");
    s
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|s| s.key == key)
}

/// Merged key/value settings.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parses config file text; `origin` labels error messages.
    pub fn parse(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("{origin}, line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Validation(format!("{origin}, line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if !known(key) {
            return Err(format!("unknown key {key:?} (see --help for the list)"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parses `key=value` as given to `--set`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set expects key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim()).map_err(CliError::Validation)
    }

    pub fn set_opt(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.set(key, &v.to_string()).expect("flag keys are known");
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        debug_assert!(known(key), "{key}");
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, CliError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Validation(format!("{key}: expected {what}, got {v:?}"))),
        }
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        self.parsed(key, "a number")
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>, CliError> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        self.parsed(key, "true or false")
    }

    fn list<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<Vec<T>>, CliError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| CliError::Validation(format!("{key}: expected {what}, got {s:?}"))))
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        self.list(key, "a comma list of numbers")
    }

    pub fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        self.list(key, "a comma list of integers")
    }

    pub fn require<T>(&self, key: &str, value: Option<T>) -> Result<T, CliError> {
        value.ok_or_else(|| CliError::Validation(format!("missing required key {key}")))
    }

    /// Experiment configuration; `outdir` is required.
    pub fn experiment_config(&self) -> Result<ExperimentConfig, CliError> {
        let d = ExperimentConfig::default();
        let experiments = match self.raw("experiment.list") {
            None => Vec::new(),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    ExperimentKind::parse(s)
                        .ok_or_else(|| CliError::Validation(format!("experiment.list: unknown experiment {s:?}")))
                })
                .collect::<Result<_, _>>()?,
        };
        if experiments.is_empty() {
            return Err(CliError::Validation("experiment.list: no experiments configured".into()));
        }
        let td = Thresholds::default();
        let ld = LimitSettings::default();
        let od = OracleParams::default();
        let qd = QvSettings::default();
        let outdir: PathBuf = self.require("experiment.outdir", self.raw("experiment.outdir").map(PathBuf::from))?;
        Ok(ExperimentConfig {
            model: self.raw("model.name").unwrap_or(&d.model).to_string(),
            dim: self.usize("model.dim")?,
            box_lower: self.f64_list("model.box_lower")?,
            box_upper: self.f64_list("model.box_upper")?,
            theta0: self.require("model.theta0", self.f64_list("model.theta0")?)?,
            h: self.require("noise.h", self.f64("noise.h")?)?,
            sigma: self.f64("noise.sigma")?.unwrap_or(d.sigma),
            plug_in: self.bool("noise.estimate")?.unwrap_or(false),
            ns: self.require("scheme.n", self.usize_list("scheme.n")?)?,
            alpha: self.f64("scheme.alpha")?.unwrap_or(d.alpha),
            kappa: self.f64("scheme.kappa")?.unwrap_or(d.kappa),
            substeps: self.usize("scheme.substeps")?.unwrap_or(d.substeps),
            burn_in: self.f64("scheme.burn_in")?,
            y0: self.f64_list("model.y0")?,
            replications: self.usize("experiment.replications")?.unwrap_or(d.replications),
            base_seed: self.u64("experiment.seed")?.unwrap_or(d.base_seed),
            workers: self.usize("experiment.workers")?,
            outdir,
            experiments,
            thresholds: Thresholds {
                tolerance: self.f64("experiment.tolerance")?.unwrap_or(td.tolerance),
                min_fraction_within: self.f64("experiment.min_fraction_within")?.unwrap_or(td.min_fraction_within),
                strict_decrease: self.bool("experiment.strict_decrease")?.unwrap_or(td.strict_decrease),
                regime_fraction: self.f64("experiment.regime_fraction")?.unwrap_or(td.regime_fraction),
                slope_tol: self.f64("experiment.slope_tol")?.unwrap_or(td.slope_tol),
            },
            search: self.search_options()?,
            limit: LimitSettings {
                theta_points: self.usize("experiment.theta_points")?.unwrap_or(ld.theta_points),
                contrast_h: self.f64("experiment.contrast_h")?,
                sign_margin: self.f64("experiment.sign_margin")?.unwrap_or(ld.sign_margin),
                oracle: OracleParams {
                    horizon: self.f64("experiment.oracle_horizon")?.unwrap_or(od.horizon),
                    substeps_per_unit: self.usize("experiment.oracle_substeps")?.unwrap_or(od.substeps_per_unit),
                    seeds: self.usize("experiment.oracle_seeds")?.unwrap_or(od.seeds),
                    ..od
                },
            },
            qv: QvSettings {
                hs: self.f64_list("experiment.qv_h")?.unwrap_or(qd.hs),
                ns: self.usize_list("experiment.qv_n")?.unwrap_or(qd.ns),
                replications: self.usize("experiment.qv_replications")?.unwrap_or(qd.replications),
            },
        })
    }

    pub fn search_options(&self) -> Result<SearchOptions, CliError> {
        let sd = SearchOptions::default();
        let opts = SearchOptions {
            grid_points: self.usize("experiment.grid_points")?.unwrap_or(sd.grid_points),
            tol: self.f64("experiment.tol")?.unwrap_or(sd.tol),
            max_iter: self.usize("experiment.max_iter")?.unwrap_or(sd.max_iter),
        };
        if opts.grid_points == 0 {
            return Err(CliError::Validation("experiment.grid_points: must be at least 1".into()));
        }
        Ok(opts)
    }
}
