//! Monte Carlo campaigns: consistency of the estimator, comparison of `Q_n`
//! with its stationary limit, and quadratic-variation rates.
//!
//! Every replication is keyed by `(experiment, group, n, rep)` and seeded by
//! [`replication_seed`]. Records are appended to `<outdir>/records.jsonl` by a
//! single writer as they complete and the file is rewritten in key order at
//! the end. A rerun skips every record whose checksum verifies, so an
//! interrupted campaign resumes where it stopped. Summaries are pure
//! functions of the records.
//!
//! Output layout:
//!
//! ```text
//! <outdir>/config.echo.json
//! <outdir>/records.jsonl
//! <outdir>/summary.csv          consistency, one row per n
//! <outdir>/limit_summary.csv    one row per (group, n)
//! <outdir>/limit_curve.csv      median Q_n and the limit on the ϑ-grid
//! <outdir>/qv_summary.csv       one row per (H, n)
//! <outdir>/qv_slopes.csv        one row per H
//! <outdir>/plotdata/*.csv       two-column x,y series
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimate::{drift_moments, estimate_h_sigma, zero_squares_with, EstimationError, ZeroSquaresOptions};
use crate::fgn::{FgnError, FgnSampler, HurstIndex};
use crate::models::{model_by_name, DriftModel, ModelError, NoiseModel, ParameterBox};
use crate::numeric::{fit_line, fit_quadratic, mean, median, quantile};
use crate::rng::{hash64, replication_seed, stream_rng};
use crate::simulate::{default_burn_in, simulate_path, ObservationScheme, OracleParams, SimulationError, SimulationPlan};
use crate::statistic::{q_n, unit_qv_deviation, NoiseLevel, StatisticInput};

pub const SUMMARY_HEADER: &str = "n,replications,succeeded,failed,median_error,p90_error,frac_within_tol,median_q_at_min";
pub const LIMIT_SUMMARY_HEADER: &str = "group,h,n,replications,succeeded,failed,median_sup_gap,median_q_at_theta0,median_quad_coef,limit_quad_coef,frac_sign_match,frac_curvature_match";
pub const LIMIT_CURVE_HEADER: &str = "group,n,theta,median_q,limit";
pub const QV_SUMMARY_HEADER: &str = "h,n,replications,mean_square";
pub const QV_SLOPES_HEADER: &str = "h,slope,target,pass";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {key}: {message}")]
    InvalidConfig { key: &'static str, message: String },
    #[error("{dir} holds a campaign with a different config; use a fresh output directory")]
    ConfigMismatch { dir: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Fgn(#[from] FgnError),
}

fn invalid(key: &'static str, message: impl Into<String>) -> HarnessError {
    HarnessError::InvalidConfig {
        key,
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Consistency,
    Limit,
    QvRates,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Consistency => "consistency",
            ExperimentKind::Limit => "limit",
            ExperimentKind::QvRates => "qv-rates",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Consistency, Self::Limit, Self::QvRates].into_iter().find(|k| k.name() == s)
    }
}

/// PASS/FAIL thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// `|ϑ̂ − ϑ₀|` counted as a success.
    pub tolerance: f64,
    /// Required share of successes at the largest `n`.
    pub min_fraction_within: f64,
    /// Require strictly (rather than weakly) decreasing medians.
    pub strict_decrease: bool,
    /// Required share of replications whose `Q_n` sign and curvature match the limit.
    pub regime_fraction: f64,
    /// Allowed distance of a QV slope from its target.
    pub slope_tol: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tolerance: 0.15,
            min_fraction_within: 0.9,
            strict_decrease: false,
            regime_fraction: 0.8,
            slope_tol: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSettings {
    /// Grid nodes per parameter axis.
    pub theta_points: usize,
    /// Second Hurst index run alongside `h` (typically 0.5).
    pub contrast_h: Option<f64>,
    pub oracle: OracleParams,
    /// Grid points with `|L(ϑ)|` below this share of `max |L|` are ignored in sign checks.
    pub sign_margin: f64,
}

impl Default for LimitSettings {
    fn default() -> Self {
        Self {
            theta_points: 21,
            contrast_h: None,
            oracle: OracleParams::default(),
            sign_margin: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QvSettings {
    pub hs: Vec<f64>,
    pub ns: Vec<usize>,
    pub replications: usize,
}

impl Default for QvSettings {
    fn default() -> Self {
        Self {
            hs: vec![0.6, 0.85],
            ns: vec![256, 512, 1024, 2048, 4096],
            replications: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: String,
    pub dim: Option<usize>,
    pub box_lower: Option<Vec<f64>>,
    pub box_upper: Option<Vec<f64>>,
    pub theta0: Vec<f64>,
    pub h: f64,
    /// Isotropic noise scale: `σ = sigma · I_d`.
    pub sigma: f64,
    /// Estimate `(H, ‖σ‖²)` from each path instead of using the true values.
    pub plug_in: bool,
    pub ns: Vec<usize>,
    pub alpha: f64,
    pub kappa: f64,
    pub substeps: usize,
    /// `None` uses [`default_burn_in`].
    pub burn_in: Option<f64>,
    /// `None` starts at the origin.
    pub y0: Option<Vec<f64>>,
    pub replications: usize,
    pub base_seed: u64,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
    pub outdir: PathBuf,
    pub experiments: Vec<ExperimentKind>,
    pub thresholds: Thresholds,
    pub search: ZeroSquaresOptions,
    pub limit: LimitSettings,
    pub qv: QvSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "fou".into(),
            dim: None,
            box_lower: None,
            box_upper: None,
            theta0: vec![-1.0],
            h: 0.7,
            sigma: 1.0,
            plug_in: false,
            ns: vec![1 << 10, 1 << 12, 1 << 14],
            alpha: 0.5,
            kappa: 1.0,
            substeps: 8,
            burn_in: None,
            y0: None,
            replications: 200,
            base_seed: 20_240_101,
            workers: None,
            outdir: PathBuf::from("campaign"),
            experiments: vec![ExperimentKind::Consistency],
            thresholds: Thresholds::default(),
            search: ZeroSquaresOptions::default(),
            limit: LimitSettings::default(),
            qv: QvSettings::default(),
        }
    }
}

fn strictly_increasing(ns: &[usize]) -> bool {
    ns.windows(2).all(|w| w[0] < w[1])
}

impl ExperimentConfig {
    pub fn build_model(&self) -> Result<Arc<dyn DriftModel>, HarnessError> {
        let bounds = match (&self.box_lower, &self.box_upper) {
            (Some(lo), Some(hi)) => Some(ParameterBox::new(lo.clone(), hi.clone())?),
            (None, None) => None,
            _ => return Err(invalid("model.box", "give both lower and upper bounds")),
        };
        Ok(model_by_name(&self.model, self.dim, bounds)?)
    }

    pub fn noise_with_h(&self, dim: usize, h: f64) -> Result<NoiseModel, HarnessError> {
        let h = HurstIndex::new(h).map_err(|e| invalid("noise.h", e.to_string()))?;
        NoiseModel::isotropic(h, self.sigma, dim).map_err(|e| invalid("noise.sigma", e.to_string()))
    }

    /// Checks every precondition; returns the model on success.
    pub fn validate(&self) -> Result<Arc<dyn DriftModel>, HarnessError> {
        let model = self.build_model()?;
        if self.experiments.is_empty() {
            return Err(invalid("experiment.list", "no experiments configured"));
        }
        if self.replications == 0 {
            return Err(invalid("experiment.replications", "must be at least 1"));
        }
        if self.ns.is_empty() || !strictly_increasing(&self.ns) {
            return Err(invalid("scheme.n", "n values must be non-empty and strictly increasing"));
        }
        for &n in &self.ns {
            ObservationScheme::new(n, self.alpha, self.kappa).map_err(|e| invalid("scheme", e.to_string()))?;
        }
        if self.ns.iter().any(|&n| n < 4) && self.plug_in {
            return Err(invalid("scheme.n", "plug-in mode needs n >= 4"));
        }
        if self.substeps == 0 {
            return Err(invalid("scheme.substeps", "must be at least 1"));
        }
        if let Some(b) = self.burn_in {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(invalid("scheme.burn_in", format!("must be >= 0, got {b}")));
            }
        }
        if self.theta0.len() != model.param_dim() {
            return Err(invalid(
                "model.theta0",
                format!("has {} entries, model has {} parameters", self.theta0.len(), model.param_dim()),
            ));
        }
        if !model.param_box().contains(&self.theta0) {
            return Err(invalid("model.theta0", format!("{:?} lies outside the parameter box", self.theta0)));
        }
        if let Some(y0) = &self.y0 {
            if y0.len() != model.dim() {
                return Err(invalid("model.y0", format!("needs {} entries", model.dim())));
            }
        }
        self.noise_with_h(model.dim(), self.h)?;
        if self.experiments.contains(&ExperimentKind::Limit) {
            if let Some(h) = self.limit.contrast_h {
                self.noise_with_h(model.dim(), h).map_err(|_| invalid("experiment.contrast_h", format!("{h} is not in (0, 1)")))?;
            }
            if self.limit.theta_points < 3 {
                return Err(invalid("experiment.theta_points", "need at least 3 grid points"));
            }
            if self.limit.oracle.seeds == 0 {
                return Err(invalid("experiment.oracle_seeds", "must be at least 1"));
            }
        }
        if self.experiments.contains(&ExperimentKind::QvRates) {
            if self.qv.hs.is_empty() || self.qv.hs.iter().any(|h| !(*h > 0.0 && *h < 1.0)) {
                return Err(invalid("experiment.qv_h", "need Hurst indices in (0, 1)"));
            }
            if self.qv.ns.len() < 2 || !strictly_increasing(&self.qv.ns) {
                return Err(invalid("experiment.qv_n", "need at least two strictly increasing sizes"));
            }
            if self.qv.replications < 2 {
                return Err(invalid("experiment.qv_replications", "need at least 2"));
            }
        }
        if self.workers == Some(0) {
            return Err(invalid("experiment.workers", "must be at least 1"));
        }
        Ok(model)
    }

    fn identity(&self) -> Self {
        Self {
            workers: None,
            outdir: PathBuf::new(),
            ..self.clone()
        }
    }

    fn y0(&self, dim: usize) -> Vec<f64> {
        self.y0.clone().unwrap_or_else(|| vec![0.0; dim])
    }

    fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

/// Wall-clock data, excluded from checksums and determinism comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub runtime_ms: u64,
}

/// One replication. `values` depends on the experiment:
/// `limit`: `Q_n` on the ϑ-grid; `limit-oracle`: the fractional limit on the
/// grid, then the Brownian limit, then `E|b(Ȳ;ϑ₀)|²` and its standard error;
/// `qv-rates`: the single normalised QV deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub experiment: String,
    pub group: String,
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub theta_hat: Option<Vec<f64>>,
    pub abs_error: Option<f64>,
    pub q_at_min: Option<f64>,
    pub h_hat: Option<f64>,
    pub sigma_norm_sq_hat: Option<f64>,
    #[serde(default)]
    pub values: Vec<f64>,
    pub failure: Option<String>,
    pub checksum: String,
    #[serde(default)]
    pub meta: RecordMeta,
}

type Key = (String, String, usize, usize);

impl ReplicationRecord {
    fn empty(task: &Task) -> Self {
        Self {
            experiment: task.experiment.to_string(),
            group: task.group.clone(),
            n: task.n,
            rep: task.rep,
            seed: task.seed,
            theta_hat: None,
            abs_error: None,
            q_at_min: None,
            h_hat: None,
            sigma_norm_sq_hat: None,
            values: Vec::new(),
            failure: None,
            checksum: String::new(),
            meta: RecordMeta::default(),
        }
    }

    fn key(&self) -> Key {
        (self.experiment.clone(), self.group.clone(), self.n, self.rep)
    }

    /// First 16 hex digits of SHA-256 over the record without `checksum` and `meta`.
    pub fn compute_checksum(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("checksum");
            map.remove("meta");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    fn sealed(mut self) -> Self {
        self.checksum = self.compute_checksum();
        self
    }

    pub fn is_valid(&self) -> bool {
        self.checksum == self.compute_checksum()
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone)]
struct Task {
    experiment: &'static str,
    group: String,
    n: usize,
    rep: usize,
    seed: u64,
}

impl Task {
    fn key(&self) -> Key {
        (self.experiment.to_string(), self.group.clone(), self.n, self.rep)
    }
}

fn string_word(s: &str) -> u64 {
    let words: Vec<u64> = s.bytes().map(u64::from).collect();
    hash64(&words)
}

/// Base seed of a replication group; the empty group uses `base` itself.
pub fn group_seed(base: u64, group: &str) -> u64 {
    if group.is_empty() {
        base
    } else {
        hash64(&[base, string_word(group)])
    }
}

fn h_label(h: f64) -> String {
    format!("h={h}")
}

/// Records on disk, keyed and kept in canonical order.
pub struct RecordStore {
    path: PathBuf,
    records: BTreeMap<Key, ReplicationRecord>,
    skipped_lines: usize,
}

impl RecordStore {
    /// Loads every checksum-valid record of `path`; a missing file is empty.
    pub fn open(path: &Path) -> Result<Self, HarnessError> {
        let mut records = BTreeMap::new();
        let mut skipped_lines = 0;
        if path.exists() {
            let file = fs::File::open(path).map_err(io_err(path))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ReplicationRecord>(&line) {
                    Ok(r) if r.is_valid() => {
                        records.insert(r.key(), r);
                    }
                    _ => skipped_lines += 1,
                }
            }
        }
        if skipped_lines > 0 {
            log::warn!("{}: ignored {skipped_lines} invalid record lines", path.display());
        }
        Ok(Self {
            path: path.to_path_buf(),
            records,
            skipped_lines,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn skipped_lines(&self) -> usize {
        self.skipped_lines
    }

    pub fn records(&self) -> impl Iterator<Item = &ReplicationRecord> {
        self.records.values()
    }

    /// Records of one experiment, in key order.
    pub fn experiment(&self, name: &str) -> Vec<ReplicationRecord> {
        self.records.values().filter(|r| r.experiment == name).cloned().collect()
    }

    /// Rewrites the file in key order through a temporary file.
    pub fn write_canonical(&self) -> Result<(), HarnessError> {
        let tmp = self.path.with_extension("jsonl.tmp");
        {
            let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            let mut w = BufWriter::new(file);
            for r in self.records.values() {
                writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err(&tmp))?;
            }
            w.flush().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &self.path).map_err(io_err(&self.path))
    }

    /// Runs the tasks that have no valid record yet on `workers` threads.
    /// Completed records are appended in task order by a single writer.
    fn run<F>(&mut self, tasks: Vec<Task>, workers: usize, work: F) -> Result<usize, HarnessError>
    where
        F: Fn(&Task) -> ReplicationRecord + Sync,
    {
        let pending: Vec<Task> = tasks
            .into_iter()
            .filter(|t| self.records.get(&t.key()).is_none_or(|r| r.seed != t.seed))
            .collect();
        if pending.is_empty() {
            return Ok(0);
        }
        self.write_canonical()?;
        let file = OpenOptions::new().append(true).open(&self.path).map_err(io_err(&self.path))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))?;
        let (tx, rx) = mpsc::channel::<(usize, ReplicationRecord)>();
        let path = self.path.clone();
        let written = std::thread::scope(|scope| {
            let writer = scope.spawn(move || -> Result<Vec<ReplicationRecord>, HarnessError> {
                let mut w = BufWriter::new(file);
                let mut buffer = BTreeMap::new();
                let mut next = 0;
                let mut out = Vec::new();
                for (i, rec) in rx {
                    buffer.insert(i, rec);
                    while let Some(r) = buffer.remove(&next) {
                        writeln!(w, "{}", serde_json::to_string(&r).expect("record serializes")).map_err(io_err(&path))?;
                        w.flush().map_err(io_err(&path))?;
                        out.push(r);
                        next += 1;
                    }
                }
                Ok(out)
            });
            pool.install(|| {
                pending.par_iter().enumerate().for_each_with(tx, |tx, (i, task)| {
                    let _ = tx.send((i, work(task)));
                })
            });
            writer.join().expect("writer thread")
        })?;
        let count = written.len();
        for r in written {
            self.records.insert(r.key(), r);
        }
        Ok(count)
    }
}

fn timed(task: &Task, f: impl FnOnce(&mut ReplicationRecord) -> Result<(), String>) -> ReplicationRecord {
    let start = Instant::now();
    let mut rec = ReplicationRecord::empty(task);
    if let Err(e) = f(&mut rec) {
        rec = ReplicationRecord::empty(task);
        rec.failure = Some(e);
    }
    rec.meta.runtime_ms = start.elapsed().as_millis() as u64;
    rec.sealed()
}

fn plan_for(config: &ExperimentConfig, model: &dyn DriftModel, n: usize, seed: u64) -> Result<SimulationPlan, String> {
    let scheme = ObservationScheme::new(n, config.alpha, config.kappa).map_err(|e| e.to_string())?;
    let burn = config.burn_in.unwrap_or_else(|| default_burn_in(model, &config.theta0));
    Ok(SimulationPlan::new(scheme, config.y0(model.dim()), seed)
        .with_substeps(config.substeps)
        .with_burn_in(burn))
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Simulate, then estimate by zero squares. Errors become the record's `failure`.
pub fn consistency_replication(
    config: &ExperimentConfig,
    model: &dyn DriftModel,
    noise: &NoiseModel,
    n: usize,
    seed: u64,
    rec: &mut ReplicationRecord,
) -> Result<(), String> {
    let plan = plan_for(config, model, n, seed)?;
    let path = simulate_path(model, &config.theta0, noise, &plan).map_err(|e| e.to_string())?;
    let level = if config.plug_in {
        let est = estimate_h_sigma(path.obs_y.view(), &plan.scheme).map_err(|e| e.to_string())?;
        rec.h_hat = Some(est.h_hat);
        rec.sigma_norm_sq_hat = Some(est.sigma_norm_sq_hat);
        est.noise_level()
    } else {
        NoiseLevel::from(noise)
    };
    let input = StatisticInput::new(model, path.obs_y.view(), plan.scheme, level).map_err(|e| e.to_string())?;
    let est = zero_squares_with(&input, model.param_box(), &config.search).map_err(|e| e.to_string())?;
    rec.abs_error = Some(norm_diff(&est.theta_hat, &config.theta0));
    rec.q_at_min = Some(est.q_at_min);
    rec.theta_hat = Some(est.theta_hat);
    Ok(())
}

/// Per-`n` consistency summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub replications: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub median_error: f64,
    pub p90_error: f64,
    pub frac_within_tol: f64,
    pub median_q_at_min: f64,
}

impl SummaryRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n,
            self.replications,
            self.succeeded,
            self.failed,
            self.median_error,
            self.p90_error,
            self.frac_within_tol,
            self.median_q_at_min
        )
    }
}

/// Aggregates consistency records per `n`; failed replications are counted
/// but excluded from the statistics.
pub fn summarize(records: &[ReplicationRecord], ns: &[usize], tolerance: f64) -> Vec<SummaryRow> {
    ns.iter()
        .map(|&n| {
            let at_n: Vec<&ReplicationRecord> = records.iter().filter(|r| r.experiment == "consistency" && r.n == n).collect();
            let ok: Vec<&ReplicationRecord> = at_n.iter().copied().filter(|r| r.succeeded()).collect();
            let errors: Vec<f64> = ok.iter().filter_map(|r| r.abs_error).collect();
            let qs: Vec<f64> = ok.iter().filter_map(|r| r.q_at_min).collect();
            let within = errors.iter().filter(|e| **e <= tolerance).count();
            SummaryRow {
                n,
                replications: at_n.len(),
                succeeded: ok.len(),
                failed: at_n.len() - ok.len(),
                median_error: median(&errors).unwrap_or(f64::NAN),
                p90_error: quantile(&errors, 0.9).unwrap_or(f64::NAN),
                frac_within_tol: if errors.is_empty() { 0.0 } else { within as f64 / errors.len() as f64 },
                median_q_at_min: median(&qs).unwrap_or(f64::NAN),
            }
        })
        .collect()
}

fn decreasing(values: &[f64], strict: bool) -> bool {
    values
        .windows(2)
        .all(|w| if strict { w[1] < w[0] } else { w[1] <= w[0] })
}

/// PASS/FAIL line of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub experiment: String,
    pub pass: bool,
    pub detail: String,
}

pub struct ConsistencyReport {
    pub rows: Vec<SummaryRow>,
    pub verdict: Verdict,
}

pub fn consistency_verdict(rows: &[SummaryRow], thresholds: &Thresholds) -> Verdict {
    let medians: Vec<f64> = rows.iter().map(|r| r.median_error).collect();
    let monotone = decreasing(&medians, thresholds.strict_decrease) && medians.iter().all(|m| m.is_finite());
    let last = rows.last().map_or(0.0, |r| r.frac_within_tol);
    let pass = monotone && last >= thresholds.min_fraction_within;
    let medians_txt: Vec<String> = medians.iter().map(|m| format!("{m:.4}")).collect();
    Verdict {
        experiment: "consistency".into(),
        pass,
        detail: format!(
            "median errors [{}] ({}), {:.1}% within {} at the largest n (need {:.0}%)",
            medians_txt.join(", "),
            if monotone { "decreasing" } else { "not decreasing" },
            100.0 * last,
            thresholds.tolerance,
            100.0 * thresholds.min_fraction_within
        ),
    }
}

struct Campaign<'a> {
    config: &'a ExperimentConfig,
    model: Arc<dyn DriftModel>,
    store: RecordStore,
}

impl<'a> Campaign<'a> {
    fn open(config: &'a ExperimentConfig) -> Result<Self, HarnessError> {
        let model = config.validate()?;
        let dir = &config.outdir;
        fs::create_dir_all(dir.join("plotdata")).map_err(io_err(dir))?;
        let echo = dir.join("config.echo.json");
        let ours = serde_json::to_string_pretty(config).expect("config serializes") + "\n";
        if echo.exists() {
            let text = fs::read_to_string(&echo).map_err(io_err(&echo))?;
            let same = serde_json::from_str::<ExperimentConfig>(&text).is_ok_and(|c| c.identity() == config.identity());
            if !same {
                return Err(HarnessError::ConfigMismatch { dir: dir.clone() });
            }
        }
        fs::write(&echo, ours).map_err(io_err(&echo))?;
        let store = RecordStore::open(&dir.join("records.jsonl"))?;
        Ok(Self { config, model, store })
    }

    fn tasks(&self, experiment: &'static str, group: &str, ns: &[usize], reps: usize) -> Vec<Task> {
        let base = group_seed(self.config.base_seed, group);
        ns.iter()
            .flat_map(|&n| {
                (0..reps).map(move |rep| Task {
                    experiment,
                    group: group.to_string(),
                    n,
                    rep,
                    seed: replication_seed(base, n, rep),
                })
            })
            .collect()
    }

    fn write_file(&self, name: &str, header: &str, lines: impl IntoIterator<Item = String>) -> Result<(), HarnessError> {
        let path = self.config.outdir.join(name);
        let mut text = String::from(header);
        text.push('\n');
        for l in lines {
            text.push_str(&l);
            text.push('\n');
        }
        fs::write(&path, text).map_err(io_err(&path))
    }

    fn plot(&self, name: &str, points: impl IntoIterator<Item = (f64, f64)>) -> Result<(), HarnessError> {
        self.write_file(&format!("plotdata/{name}.csv"), "x,y", points.into_iter().map(|(x, y)| format!("{x},{y}")))
    }

    fn consistency(&mut self) -> Result<ConsistencyReport, HarnessError> {
        let config = self.config;
        let model = self.model.clone();
        let noise = config.noise_with_h(model.dim(), config.h)?;
        let tasks = self.tasks("consistency", "", &config.ns, config.replications);
        self.store.run(tasks, config.workers(), |t| {
            timed(t, |rec| consistency_replication(config, model.as_ref(), &noise, t.n, t.seed, rec))
        })?;
        self.store.write_canonical()?;
        let records = self.store.experiment("consistency");
        let rows = summarize(&records, &config.ns, config.thresholds.tolerance);
        self.write_file("summary.csv", SUMMARY_HEADER, rows.iter().map(SummaryRow::csv))?;
        self.plot("consistency_median_error", rows.iter().map(|r| (r.n as f64, r.median_error)))?;
        self.plot("consistency_p90_error", rows.iter().map(|r| (r.n as f64, r.p90_error)))?;
        let verdict = consistency_verdict(&rows, &config.thresholds);
        Ok(ConsistencyReport { rows, verdict })
    }
}

/// Runs the consistency campaign described by `config` (resuming if possible).
pub fn run_consistency(config: &ExperimentConfig) -> Result<ConsistencyReport, HarnessError> {
    Campaign::open(config)?.consistency()
}

/// `(group, n)` row of the limit comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitRow {
    pub group: String,
    pub h: f64,
    pub n: usize,
    pub replications: usize,
    pub succeeded: usize,
    pub failed: usize,
    /// Median over replications of `max_ϑ |Q_n(ϑ) − L(ϑ)|`.
    pub median_sup_gap: f64,
    pub median_q_at_theta0: f64,
    /// Median leading coefficient of the quadratic fitted to `ϑ ↦ Q_n(ϑ)` (one-parameter models).
    pub median_quad_coef: f64,
    pub limit_quad_coef: f64,
    /// Share of replications with `sign Q_n = sign L` wherever `|L|` is not negligible.
    pub frac_sign_match: f64,
    /// Share of replications whose fitted curvature has the sign of the limit's.
    pub frac_curvature_match: f64,
    /// Share of replications with a negative fitted quadratic coefficient.
    pub frac_negative_curvature: f64,
    /// Median `Q_n(ϑ)` over replications, per grid point.
    pub median_curve: Vec<f64>,
}

impl LimitRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.group,
            self.h,
            self.n,
            self.replications,
            self.succeeded,
            self.failed,
            self.median_sup_gap,
            self.median_q_at_theta0,
            self.median_quad_coef,
            self.limit_quad_coef,
            self.frac_sign_match,
            self.frac_curvature_match
        )
    }
}

/// The limit `Q_n` is compared with at Hurst index `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitOracle {
    pub group: String,
    pub h: f64,
    pub thetas: Vec<Vec<f64>>,
    /// Fractional limit for `h > 1/2`, Brownian limit for `h = 1/2`.
    pub limit: Vec<f64>,
    pub fractional: Vec<f64>,
    pub brownian: Vec<f64>,
    pub b0_sq: f64,
    /// Relative standard error of `E|b(Ȳ;ϑ₀)|²` across oracle seeds.
    pub relative_noise: f64,
}

impl LimitOracle {
    fn from_record(rec: &ReplicationRecord, h: f64, thetas: &[Vec<f64>]) -> Option<Self> {
        let g = thetas.len();
        if !rec.succeeded() || rec.values.len() != 2 * g + 2 {
            return None;
        }
        let fractional = rec.values[..g].to_vec();
        let brownian = rec.values[g..2 * g].to_vec();
        let b0_sq = rec.values[2 * g];
        let stderr = rec.values[2 * g + 1];
        let limit = if h == 0.5 { brownian.clone() } else { fractional.clone() };
        Some(Self {
            group: rec.group.clone(),
            h,
            thetas: thetas.to_vec(),
            limit,
            fractional,
            brownian,
            b0_sq,
            relative_noise: stderr / b0_sq.abs(),
        })
    }
}

pub struct LimitReport {
    pub oracles: Vec<LimitOracle>,
    pub rows: Vec<LimitRow>,
    pub verdict: Verdict,
}

fn quad_coef(thetas: &[Vec<f64>], values: &[f64]) -> f64 {
    if thetas.first().is_none_or(|t| t.len() != 1) {
        return f64::NAN;
    }
    let x: Vec<f64> = thetas.iter().map(|t| t[0]).collect();
    fit_quadratic(&x, values)[2]
}

fn signs_match(q: &[f64], limit: &[f64], margin: f64) -> bool {
    let scale = limit.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    q.iter()
        .zip(limit)
        .filter(|(_, l)| l.abs() >= margin * scale)
        .all(|(q, l)| q.signum() == l.signum())
}

/// Aggregates limit records; pure in `(records, oracles, config)`.
pub fn summarize_limit(records: &[ReplicationRecord], oracles: &[LimitOracle], config: &ExperimentConfig) -> Vec<LimitRow> {
    let mut rows = Vec::new();
    for oracle in oracles {
        let theta0_index = oracle
            .thetas
            .iter()
            .enumerate()
            .min_by(|a, b| norm_diff(a.1, &config.theta0).total_cmp(&norm_diff(b.1, &config.theta0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let limit_coef = quad_coef(&oracle.thetas, &oracle.limit);
        for &n in &config.ns {
            let at: Vec<&ReplicationRecord> = records
                .iter()
                .filter(|r| r.experiment == "limit" && r.group == oracle.group && r.n == n)
                .collect();
            let ok: Vec<&ReplicationRecord> = at
                .iter()
                .copied()
                .filter(|r| r.succeeded() && r.values.len() == oracle.thetas.len())
                .collect();
            let gaps: Vec<f64> = ok
                .iter()
                .map(|r| r.values.iter().zip(&oracle.limit).fold(0.0f64, |m, (q, l)| m.max((q - l).abs())))
                .collect();
            let coefs: Vec<f64> = ok.iter().map(|r| quad_coef(&oracle.thetas, &r.values)).collect();
            let count = ok.len().max(1) as f64;
            let frac = |pred: &dyn Fn(&ReplicationRecord, f64) -> bool| {
                ok.iter().zip(&coefs).filter(|(r, c)| pred(r, **c)).count() as f64 / count
            };
            let median_curve = (0..oracle.thetas.len())
                .map(|i| median(&ok.iter().map(|r| r.values[i]).collect::<Vec<_>>()).unwrap_or(f64::NAN))
                .collect();
            rows.push(LimitRow {
                group: oracle.group.clone(),
                h: oracle.h,
                n,
                replications: at.len(),
                succeeded: ok.len(),
                failed: at.len() - ok.len(),
                median_sup_gap: median(&gaps).unwrap_or(f64::NAN),
                median_q_at_theta0: median(&ok.iter().map(|r| r.values[theta0_index]).collect::<Vec<_>>()).unwrap_or(f64::NAN),
                median_quad_coef: median(&coefs).unwrap_or(f64::NAN),
                limit_quad_coef: limit_coef,
                frac_sign_match: frac(&|r, _| signs_match(&r.values, &oracle.limit, config.limit.sign_margin)),
                frac_curvature_match: frac(&|_, c| c.signum() == limit_coef.signum()),
                frac_negative_curvature: frac(&|_, c| c < 0.0),
                median_curve,
            });
        }
    }
    rows
}

pub fn limit_verdict(rows: &[LimitRow], thresholds: &Thresholds) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut groups: Vec<&str> = rows.iter().map(|r| r.group.as_str()).collect();
    groups.dedup();
    for g in groups {
        let gr: Vec<&LimitRow> = rows.iter().filter(|r| r.group == g).collect();
        let gaps: Vec<f64> = gr.iter().map(|r| r.median_sup_gap).collect();
        let monotone = decreasing(&gaps, thresholds.strict_decrease) && gaps.iter().all(|v| v.is_finite());
        let last = gr.last().expect("at least one n");
        let regime = last.frac_sign_match >= thresholds.regime_fraction
            && (last.limit_quad_coef.is_nan() || last.frac_curvature_match >= thresholds.regime_fraction);
        pass &= monotone && regime;
        let gaps_txt: Vec<String> = gaps.iter().map(|v| format!("{v:.4}")).collect();
        parts.push(format!(
            "{g}: sup gaps [{}] ({}), sign match {:.1}%, curvature match {:.1}%",
            gaps_txt.join(", "),
            if monotone { "decreasing" } else { "not decreasing" },
            100.0 * last.frac_sign_match,
            100.0 * last.frac_curvature_match
        ));
    }
    Verdict {
        experiment: "limit".into(),
        pass,
        detail: parts.join("; "),
    }
}

impl Campaign<'_> {
    fn limit(&mut self) -> Result<LimitReport, HarnessError> {
        let config = self.config;
        let model = self.model.clone();
        let bounds = model.param_box();
        let g = bounds.grid_len(config.limit.theta_points);
        let thetas: Vec<Vec<f64>> = (0..g).map(|i| bounds.grid_point(config.limit.theta_points, i)).collect();
        let mut hs = vec![config.h];
        if let Some(h) = config.limit.contrast_h {
            if h != config.h {
                hs.push(h);
            }
        }

        for &h in &hs {
            let noise = config.noise_with_h(model.dim(), h)?;
            let group = h_label(h);
            let oracle_task = Task {
                experiment: "limit-oracle",
                group: group.clone(),
                n: 0,
                rep: 0,
                seed: group_seed(config.limit.oracle.base_seed, &group),
            };
            self.store.run(vec![oracle_task], 1, |t| {
                timed(t, |rec| {
                    let oracle = OracleParams {
                        base_seed: t.seed,
                        ..config.limit.oracle
                    };
                    let m = drift_moments(model.as_ref(), &config.theta0, &noise, &thetas, &oracle).map_err(|e| e.to_string())?;
                    rec.values = m.fractional_limit();
                    rec.values.extend(m.brownian_limit());
                    rec.values.push(m.b0_sq);
                    rec.values.push(m.b0_sq_stderr);
                    Ok(())
                })
            })?;
            let tasks = self.tasks("limit", &group, &config.ns, config.replications);
            self.store.run(tasks, config.workers(), |t| {
                timed(t, |rec| {
                    let plan = plan_for(config, model.as_ref(), t.n, t.seed)?;
                    let path = simulate_path(model.as_ref(), &config.theta0, &noise, &plan).map_err(|e| e.to_string())?;
                    let input = StatisticInput::from_path(model.as_ref(), &path).map_err(|e| e.to_string())?;
                    rec.values = thetas.iter().map(|th| q_n(&input, th)).collect();
                    if rec.values.iter().any(|v| !v.is_finite()) {
                        return Err("non-finite statistic on the theta grid".into());
                    }
                    Ok(())
                })
            })?;
        }
        self.store.write_canonical()?;

        let records = self.store.experiment("limit");
        let mut oracles = Vec::new();
        for &h in &hs {
            let group = h_label(h);
            let rec = self
                .store
                .records()
                .find(|r| r.experiment == "limit-oracle" && r.group == group)
                .cloned()
                .expect("oracle record present");
            match LimitOracle::from_record(&rec, h, &thetas) {
                Some(o) => oracles.push(o),
                None => {
                    return Err(HarnessError::Simulation(SimulationError::InvalidPlan(format!(
                        "limit oracle for {group} failed: {}",
                        rec.failure.unwrap_or_default()
                    ))))
                }
            }
        }
        let rows = summarize_limit(&records, &oracles, config);
        self.write_file("limit_summary.csv", LIMIT_SUMMARY_HEADER, rows.iter().map(LimitRow::csv))?;
        let mut curve = Vec::new();
        for row in &rows {
            let oracle = oracles.iter().find(|o| o.group == row.group).expect("oracle of row");
            for (i, th) in oracle.thetas.iter().enumerate() {
                let t: Vec<String> = th.iter().map(|v| v.to_string()).collect();
                curve.push(format!("{},{},{},{},{}", row.group, row.n, t.join(" "), row.median_curve[i], oracle.limit[i]));
            }
            if oracle.thetas[0].len() == 1 {
                self.plot(
                    &format!("limit_{}_n{}_median_q", row.group, row.n),
                    oracle.thetas.iter().zip(&row.median_curve).map(|(t, q)| (t[0], *q)),
                )?;
            }
        }
        for oracle in &oracles {
            if oracle.thetas[0].len() == 1 {
                self.plot(
                    &format!("limit_{}_limit", oracle.group),
                    oracle.thetas.iter().zip(&oracle.limit).map(|(t, l)| (t[0], *l)),
                )?;
            }
            let rows_g: Vec<&LimitRow> = rows.iter().filter(|r| r.group == oracle.group).collect();
            self.plot(
                &format!("limit_{}_sup_gap", oracle.group),
                rows_g.iter().map(|r| (r.n as f64, r.median_sup_gap)),
            )?;
        }
        self.write_file("limit_curve.csv", LIMIT_CURVE_HEADER, curve)?;
        let verdict = limit_verdict(&rows, &config.thresholds);
        Ok(LimitReport { oracles, rows, verdict })
    }
}

/// Tabulates median `Q_n` against the stationary limit on a ϑ-grid, for `h`
/// and optionally a contrast Hurst index.
pub fn run_limit_comparison(config: &ExperimentConfig) -> Result<LimitReport, HarnessError> {
    Campaign::open(config)?.limit()
}

/// Target log-log slope of the QV second moment: `−1` for `H ≤ 3/4`, `−(4 − 4H)` above.
pub fn qv_target_slope(h: f64) -> f64 {
    if h <= 0.75 {
        -1.0
    } else {
        -(4.0 - 4.0 * h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QvRow {
    pub h: f64,
    pub n: usize,
    pub replications: usize,
    /// Mean over replications of `((1/n) Σ (x_k² − 1))²`.
    pub mean_square: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QvSlope {
    pub h: f64,
    pub slope: f64,
    pub target: f64,
    pub pass: bool,
}

pub struct QvReport {
    pub rows: Vec<QvRow>,
    pub slopes: Vec<QvSlope>,
    pub verdict: Verdict,
}

/// Normalised QV deviation of one unit-step fGN sequence.
pub fn qv_replication(h: f64, n: usize, seed: u64) -> Result<f64, HarnessError> {
    let h = HurstIndex::new(h)?;
    let sampler = FgnSampler::new(h, n)?;
    let x = sampler.sample(&mut stream_rng(seed, 0), 1.0);
    Ok(unit_qv_deviation(&x))
}

pub fn summarize_qv(records: &[ReplicationRecord], hs: &[f64], ns: &[usize], slope_tol: f64) -> (Vec<QvRow>, Vec<QvSlope>) {
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &h in hs {
        let group = h_label(h);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &n in ns {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.experiment == "qv-rates" && r.group == group && r.n == n && r.succeeded())
                .filter_map(|r| r.values.first().copied())
                .collect();
            let ms = mean(&vals.iter().map(|v| v * v).collect::<Vec<_>>());
            xs.push((n as f64).ln());
            ys.push(ms.ln());
            rows.push(QvRow {
                h,
                n,
                replications: vals.len(),
                mean_square: ms,
            });
        }
        let (slope, _) = fit_line(&xs, &ys);
        let target = qv_target_slope(h);
        slopes.push(QvSlope {
            h,
            slope,
            target,
            pass: (slope - target).abs() <= slope_tol,
        });
    }
    (rows, slopes)
}

impl Campaign<'_> {
    fn qv_rates(&mut self) -> Result<QvReport, HarnessError> {
        let config = self.config;
        let qv = &config.qv;
        for &h in &qv.hs {
            let tasks = self.tasks("qv-rates", &h_label(h), &qv.ns, qv.replications);
            self.store.run(tasks, config.workers(), |t| {
                timed(t, |rec| {
                    rec.values = vec![qv_replication(h, t.n, t.seed).map_err(|e| e.to_string())?];
                    Ok(())
                })
            })?;
        }
        self.store.write_canonical()?;
        let records = self.store.experiment("qv-rates");
        let (rows, slopes) = summarize_qv(&records, &qv.hs, &qv.ns, config.thresholds.slope_tol);
        self.write_file(
            "qv_summary.csv",
            QV_SUMMARY_HEADER,
            rows.iter().map(|r| format!("{},{},{},{}", r.h, r.n, r.replications, r.mean_square)),
        )?;
        self.write_file(
            "qv_slopes.csv",
            QV_SLOPES_HEADER,
            slopes.iter().map(|s| format!("{},{},{},{}", s.h, s.slope, s.target, s.pass)),
        )?;
        for &h in &qv.hs {
            self.plot(
                &format!("qv_{}", h_label(h)),
                rows.iter().filter(|r| r.h == h).map(|r| ((r.n as f64).ln(), r.mean_square.ln())),
            )?;
        }
        let detail: Vec<String> = slopes
            .iter()
            .map(|s| format!("H={}: slope {:.3} vs {:.3}", s.h, s.slope, s.target))
            .collect();
        let verdict = Verdict {
            experiment: "qv-rates".into(),
            pass: slopes.iter().all(|s| s.pass),
            detail: detail.join("; "),
        };
        Ok(QvReport { rows, slopes, verdict })
    }
}

/// Log-log slopes of the QV second moment for each configured `H`.
pub fn run_qv_rates(config: &ExperimentConfig) -> Result<QvReport, HarnessError> {
    Campaign::open(config)?.qv_rates()
}

/// Runs every configured experiment in order and returns one verdict each.
pub fn run_all(config: &ExperimentConfig) -> Result<Vec<Verdict>, HarnessError> {
    let mut campaign = Campaign::open(config)?;
    let mut verdicts = Vec::new();
    for kind in &config.experiments {
        let v = match kind {
            ExperimentKind::Consistency => campaign.consistency()?.verdict,
            ExperimentKind::Limit => campaign.limit()?.verdict,
            ExperimentKind::QvRates => campaign.qv_rates()?.verdict,
        };
        verdicts.push(v);
    }
    Ok(verdicts)
}
