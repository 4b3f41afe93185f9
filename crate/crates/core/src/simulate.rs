//! Euler integration of `dY = b(Y; ϑ₀) dt + Σ_j σ_j dB^{(j)}` with exact fBm forcing.
//!
//! The SDE is integrated on a fine grid with `substeps` steps per observation
//! gap `α_n = κ n^{−α}`. A burn-in segment of the same fine step is simulated
//! first and discarded so that the observed window starts close to the
//! stationary regime; its endpoint becomes `Y_0`. The noise path
//! `F_t = Σ_j σ_j B_t^{(j)}` is re-zeroed at `t = 0`.
//!
//! The default burn-in of `10 / c₁` contraction times is a heuristic: the
//! forgetting of the initial condition is exponential under dissipativity, but
//! no quantitative bound for general models is available.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fgn::{FgnError, FgnSpec, FgnSampler};
use crate::models::{DriftModel, ModelError, NoiseModel};
use crate::numeric::KahanSum;

pub const DEFAULT_SUBSTEPS: usize = 8;
/// Contraction times simulated before `t = 0`.
pub const BURN_IN_CONTRACTIONS: f64 = 10.0;
/// Burn-in used when a model exposes no analytic dissipativity constant.
pub const FALLBACK_BURN_IN: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("invalid observation scheme: {0}")]
    InvalidScheme(String),
    #[error("invalid simulation plan: {0}")]
    InvalidPlan(String),
    #[error("state became non-finite at fine step {step} (t = {time})")]
    NonFinite { step: usize, time: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fgn(#[from] FgnError),
}

/// Equally spaced observation times `t_k = k·α_n`, `α_n = κ n^{−α}`, `k = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationScheme {
    n: usize,
    alpha: f64,
    kappa: f64,
}

impl ObservationScheme {
    pub fn new(n: usize, alpha: f64, kappa: f64) -> Result<Self, SimulationError> {
        if n == 0 {
            return Err(SimulationError::InvalidScheme(format!("n must be at least 1, got {n}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(SimulationError::InvalidScheme(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(SimulationError::InvalidScheme(format!("kappa must be positive, got {kappa}")));
        }
        Ok(Self { n, alpha, kappa })
    }

    /// Scheme with a prescribed spacing; `kappa` is back-solved for the given `alpha`.
    pub fn with_spacing(n: usize, alpha: f64, spacing: f64) -> Result<Self, SimulationError> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(SimulationError::InvalidScheme(format!("spacing must be positive, got {spacing}")));
        }
        Self::new(n, alpha, spacing * (n as f64).powf(alpha))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Observation spacing `α_n`.
    pub fn alpha_n(&self) -> f64 {
        self.kappa * (self.n as f64).powf(-self.alpha)
    }

    /// `T_n = n·α_n`.
    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.alpha_n()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.alpha_n()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n).map(|k| self.time(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationPlan {
    pub scheme: ObservationScheme,
    /// Fine Euler steps per observation gap.
    pub substeps: usize,
    /// Time simulated and discarded before `t = 0`.
    pub burn_in: f64,
    pub y0: Vec<f64>,
    pub seed: u64,
    /// Retain the fine-grid trajectory in the [`PathRecord`].
    #[serde(default)]
    pub keep_fine: bool,
}

impl SimulationPlan {
    pub fn new(scheme: ObservationScheme, y0: Vec<f64>, seed: u64) -> Self {
        Self {
            scheme,
            substeps: DEFAULT_SUBSTEPS,
            burn_in: 0.0,
            y0,
            seed,
            keep_fine: false,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn with_burn_in(mut self, burn_in: f64) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn keeping_fine(mut self) -> Self {
        self.keep_fine = true;
        self
    }

    /// Fine step `δ = α_n / substeps`.
    pub fn fine_step(&self) -> f64 {
        self.scheme.alpha_n() / self.substeps as f64
    }

    fn burn_in_steps(&self) -> usize {
        if self.burn_in > 0.0 {
            (self.burn_in / self.fine_step()).ceil() as usize
        } else {
            0
        }
    }

    fn validate(&self, dim: usize) -> Result<(), SimulationError> {
        if self.substeps == 0 {
            return Err(SimulationError::InvalidPlan("substeps must be at least 1".into()));
        }
        if !(self.burn_in >= 0.0 && self.burn_in.is_finite()) {
            return Err(SimulationError::InvalidPlan(format!("burn_in must be >= 0, got {}", self.burn_in)));
        }
        if self.y0.len() != dim {
            return Err(SimulationError::InvalidPlan(format!(
                "y0 has length {}, model dimension is {dim}",
                self.y0.len()
            )));
        }
        if self.y0.iter().any(|v| !v.is_finite()) {
            return Err(SimulationError::InvalidPlan("y0 must be finite".into()));
        }
        Ok(())
    }
}

/// `BURN_IN_CONTRACTIONS / c₁` using the contraction rate at `theta0`
/// (or the box-uniform constant when the model only knows that).
pub fn default_burn_in(model: &dyn DriftModel, theta0: &[f64]) -> f64 {
    model
        .contraction_rate(theta0)
        .or_else(|| model.dissipativity_constant())
        .filter(|c| *c > 0.0)
        .map(|c| BURN_IN_CONTRACTIONS / c)
        .unwrap_or(FALLBACK_BURN_IN)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineGrid {
    pub times: Vec<f64>,
    /// `d × (n·substeps + 1)`.
    pub y: Array2<f64>,
}

/// A simulated trajectory and its observation subsample.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub fine: Option<FineGrid>,
    pub obs_times: Vec<f64>,
    /// `Y` at `t_0..t_n`, `d × (n+1)`.
    pub obs_y: Array2<f64>,
    /// `F` at `t_0..t_n`, `d × (n+1)`; first column is zero.
    pub obs_noise: Array2<f64>,
    pub plan: SimulationPlan,
    pub model: String,
    pub theta0: Vec<f64>,
    pub noise: NoiseModel,
}

impl PathRecord {
    pub fn dim(&self) -> usize {
        self.obs_y.nrows()
    }

    pub fn scheme(&self) -> &ObservationScheme {
        &self.plan.scheme
    }
}

fn check_inputs(model: &dyn DriftModel, theta0: &[f64], noise: &NoiseModel) -> Result<(), SimulationError> {
    model.param_box().check(theta0)?;
    if noise.dim() != model.dim() {
        return Err(SimulationError::InvalidPlan(format!(
            "noise has {} rows, model dimension is {}",
            noise.dim(),
            model.dim()
        )));
    }
    Ok(())
}

/// One Euler step in place: `y ← y + b(y)·δ + dF`, with `dF = σ·dB` written to `df`.
#[inline]
fn euler_step(
    model: &dyn DriftModel,
    theta0: &[f64],
    sigma: ArrayView2<'_, f64>,
    db: impl Fn(usize) -> f64,
    step: f64,
    y: &mut [f64],
    b: &mut [f64],
    df: &mut [f64],
) {
    model.drift(y, theta0, b);
    for (i, dfi) in df.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..sigma.ncols() {
            acc += sigma[[i, j]] * db(j);
        }
        *dfi = acc;
    }
    for i in 0..y.len() {
        y[i] += b[i] * step + df[i];
    }
}

/// Integrates the SDE with explicit Euler on the fine grid of `plan`.
///
/// Deterministic in `(model, theta0, noise, plan)`. The caller is responsible
/// for choosing a model that is dissipative at `theta0`.
pub fn simulate_path(
    model: &dyn DriftModel,
    theta0: &[f64],
    noise: &NoiseModel,
    plan: &SimulationPlan,
) -> Result<PathRecord, SimulationError> {
    check_inputs(model, theta0, noise)?;
    plan.validate(model.dim())?;
    let total = fine_increment_count(plan);
    let spec = FgnSpec::new(noise.hurst(), plan.fine_step(), total, noise.components(), plan.seed)?;
    let increments = FgnSampler::new(spec.h, total)?.sample_spec(&spec).into_inner();
    integrate_with_increments(model, theta0, noise, plan, increments.view())
}

/// Number of fine increments (burn-in included) consumed by `plan`.
pub fn fine_increment_count(plan: &SimulationPlan) -> usize {
    plan.burn_in_steps() + plan.scheme.n() * plan.substeps
}

/// Euler integration driven by caller-supplied fBm increments
/// (`m × fine_increment_count(plan)`, spacing `plan.fine_step()`).
pub fn integrate_with_increments(
    model: &dyn DriftModel,
    theta0: &[f64],
    noise: &NoiseModel,
    plan: &SimulationPlan,
    increments: ArrayView2<'_, f64>,
) -> Result<PathRecord, SimulationError> {
    check_inputs(model, theta0, noise)?;
    plan.validate(model.dim())?;

    let d = model.dim();
    let scheme = plan.scheme;
    let n = scheme.n();
    let s = plan.substeps;
    let step = plan.fine_step();
    let burn = plan.burn_in_steps();
    let main = n * s;
    let total = burn + main;
    if increments.dim() != (noise.components(), total) {
        return Err(SimulationError::InvalidPlan(format!(
            "increments have shape {:?}, plan needs ({}, {total})",
            increments.dim(),
            noise.components()
        )));
    }
    let sigma = noise.sigma().view();

    let mut y = plan.y0.clone();
    let mut b = vec![0.0; d];
    let mut df = vec![0.0; d];
    let mut f = vec![0.0; d];
    let mut obs_y = Array2::zeros((d, n + 1));
    let mut obs_noise = Array2::zeros((d, n + 1));
    let mut fine_y = plan.keep_fine.then(|| Array2::zeros((d, main + 1)));

    let alpha_n = scheme.alpha_n();
    let fine_time = |i: usize| (i / s) as f64 * alpha_n + (i % s) as f64 * step;

    for i in 0..total {
        if i == burn {
            for r in 0..d {
                obs_y[[r, 0]] = y[r];
                if let Some(fy) = fine_y.as_mut() {
                    fy[[r, 0]] = y[r];
                }
            }
        }
        euler_step(model, theta0, sigma, |j| increments[[j, i]], step, &mut y, &mut b, &mut df);
        if y.iter().any(|v| !v.is_finite()) {
            let time = if i < burn {
                -((burn - i - 1) as f64) * step
            } else {
                fine_time(i + 1 - burn)
            };
            return Err(SimulationError::NonFinite { step: i, time });
        }
        if i >= burn {
            let fi = i + 1 - burn;
            for r in 0..d {
                f[r] += df[r];
            }
            if let Some(fy) = fine_y.as_mut() {
                for r in 0..d {
                    fy[[r, fi]] = y[r];
                }
            }
            if fi % s == 0 {
                let k = fi / s;
                for r in 0..d {
                    obs_y[[r, k]] = y[r];
                    obs_noise[[r, k]] = f[r];
                }
            }
        }
    }

    let fine = fine_y.map(|y| FineGrid {
        times: (0..=main).map(fine_time).collect(),
        y,
    });
    Ok(PathRecord {
        fine,
        obs_times: scheme.times(),
        obs_y,
        obs_noise,
        plan: plan.clone(),
        model: model.name().to_string(),
        theta0: theta0.to_vec(),
        noise: noise.clone(),
    })
}

/// Settings of the long-run time-average oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    /// Total simulated time per trajectory, burn-in included.
    pub horizon: f64,
    pub substeps_per_unit: usize,
    /// Number of independent trajectories averaged.
    pub seeds: usize,
    pub base_seed: u64,
    /// Overrides [`default_burn_in`].
    pub burn_in: Option<f64>,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            horizon: 5_000.0,
            substeps_per_unit: 16,
            seeds: 8,
            base_seed: 0x5eed,
            burn_in: None,
        }
    }
}

/// Time averages `(1/(T−T_b)) ∫_{T_b}^T g_i(Y_t) dt` of several functions along
/// one trajectory, left-point rule on the fine grid. The trajectory itself is
/// not stored.
pub fn stationary_moments(
    model: &dyn DriftModel,
    theta0: &[f64],
    noise: &NoiseModel,
    gs: &[&(dyn Fn(&[f64]) -> f64 + Sync)],
    horizon: f64,
    substeps_per_unit: usize,
    burn_in: Option<f64>,
    seed: u64,
) -> Result<Vec<f64>, SimulationError> {
    check_inputs(model, theta0, noise)?;
    if substeps_per_unit == 0 {
        return Err(SimulationError::InvalidPlan("substeps_per_unit must be at least 1".into()));
    }
    let burn_in = burn_in.unwrap_or_else(|| default_burn_in(model, theta0));
    if !(horizon > burn_in) {
        return Err(SimulationError::InvalidPlan(format!(
            "horizon {horizon} must exceed burn-in {burn_in}"
        )));
    }
    let step = 1.0 / substeps_per_unit as f64;
    let total = (horizon / step).ceil() as usize;
    let burn = (burn_in / step).ceil() as usize;

    let spec = FgnSpec::new(noise.hurst(), step, total, noise.components(), seed)?;
    let increments = FgnSampler::new(spec.h, total)?.sample_spec(&spec).into_inner();
    let sigma = noise.sigma().view();

    let d = model.dim();
    let mut y = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut df = vec![0.0; d];
    let mut sums = vec![KahanSum::new(); gs.len()];
    for i in 0..total {
        if i >= burn {
            for (acc, g) in sums.iter_mut().zip(gs) {
                acc.add(g(&y));
            }
        }
        euler_step(model, theta0, sigma, |j| increments[[j, i]], step, &mut y, &mut b, &mut df);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SimulationError::NonFinite {
                step: i,
                time: (i + 1) as f64 * step - burn_in,
            });
        }
    }
    let count = (total - burn) as f64;
    Ok(sums.iter().map(|s| s.value() / count).collect())
}

/// Single-function form of [`stationary_moments`].
pub fn stationary_moment(
    model: &dyn DriftModel,
    theta0: &[f64],
    noise: &NoiseModel,
    g: &(dyn Fn(&[f64]) -> f64 + Sync),
    horizon: f64,
    substeps_per_unit: usize,
    seed: u64,
) -> Result<f64, SimulationError> {
    Ok(stationary_moments(model, theta0, noise, &[g], horizon, substeps_per_unit, None, seed)?[0])
}
