//! Estimators: the zero-squares root of `Q_n`, the explicit fOU root,
//! quadratic-variation estimates of `(H, ‖σ‖²)`, and the stationary limit
//! curves that `Q_n` is compared against.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{DriftModel, NoiseModel, ParameterBox};
use crate::numeric::KahanSum;
use crate::optim::{minimize_on_box, OptimError, SearchOptions};
use crate::rng::hash64;
use crate::simulate::{stationary_moments, ObservationScheme, OracleParams, SimulationError};
use crate::statistic::{q_n, NoiseLevel, StatisticInput};

/// Bounds applied to the quadratic-variation estimate of `H`.
pub const H_CLAMP: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("parameter box is degenerate: {0}")]
    EmptyBox(String),
    #[error("statistic is not finite at theta = {theta:?}")]
    NonFiniteStatistic { theta: Vec<f64> },
    #[error("all observations are zero")]
    DegeneratePath,
    #[error("observed path has zero quadratic variation")]
    ZeroVariation,
    #[error("need at least {needed} observation gaps, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("closed form needs one-dimensional observations, got {0} rows")]
    NotOneDimensional(usize),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

impl From<OptimError> for EstimationError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::EmptyBox(s) => Self::EmptyBox(s),
            OptimError::NonFinite { theta } => Self::NonFiniteStatistic { theta },
        }
    }
}

pub type ZeroSquaresOptions = SearchOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: Vec<f64>,
    /// `Q_n(theta_hat)`, signed.
    pub q_at_min: f64,
    pub iterations: usize,
    pub grid_stage_min: Vec<f64>,
    pub converged: bool,
}

/// `argmin_{ϑ ∈ Θ} |Q_n(ϑ)|` with default search options.
pub fn zero_squares(input: &StatisticInput<'_>) -> Result<EstimationResult, EstimationError> {
    zero_squares_with(input, input.model().param_box(), &ZeroSquaresOptions::default())
}

pub fn zero_squares_with(
    input: &StatisticInput<'_>,
    bounds: &ParameterBox,
    opts: &ZeroSquaresOptions,
) -> Result<EstimationResult, EstimationError> {
    let r = minimize_on_box(|t| q_n(input, t).abs(), bounds, opts)?;
    Ok(EstimationResult {
        q_at_min: q_n(input, &r.x),
        theta_hat: r.x,
        iterations: r.iterations,
        grid_stage_min: r.grid_x,
        converged: r.converged,
    })
}

/// Root of the fOU quadratic `Q_n(ϑ) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormFou {
    /// The minus root.
    pub theta_hat: f64,
    pub plus_root: f64,
    /// `(S₁/(S₂α))² − S₃/(S₂α²)` before clamping.
    pub discriminant: f64,
    /// The discriminant was negative and replaced by 0.
    pub clamped: bool,
}

impl ClosedFormFou {
    /// True when the plus root also lies in `bounds` and differs from the minus root.
    pub fn plus_root_admissible(&self, bounds: &ParameterBox) -> bool {
        !self.clamped && self.plus_root != self.theta_hat && bounds.contains(&[self.plus_root])
    }
}

/// Explicit estimator for `b(x; ϑ) = ϑx`, `d = 1`.
pub fn closed_form_fou(
    obs_y: ArrayView2<'_, f64>,
    scheme: &ObservationScheme,
    noise: &NoiseLevel,
) -> Result<ClosedFormFou, EstimationError> {
    if obs_y.nrows() != 1 {
        return Err(EstimationError::NotOneDimensional(obs_y.nrows()));
    }
    let y = obs_y.row(0);
    let n = y.len() - 1;
    let alpha_n = scheme.alpha_n();
    let centre = noise.increment_variance(alpha_n);
    let (mut s1, mut s2, mut s3) = (KahanSum::new(), KahanSum::new(), KahanSum::new());
    for k in 0..n {
        let dy = y[k + 1] - y[k];
        s1.add(y[k] * dy);
        s2.add(y[k] * y[k]);
        s3.add(dy * dy - centre);
    }
    let (s1, s2, s3) = (s1.value(), s2.value(), s3.value());
    if s2 == 0.0 {
        return Err(EstimationError::DegeneratePath);
    }
    let m = s1 / (s2 * alpha_n);
    let discriminant = m * m - s3 / (s2 * alpha_n * alpha_n);
    let clamped = discriminant < 0.0;
    let root = discriminant.max(0.0).sqrt();
    Ok(ClosedFormFou {
        theta_hat: m - root,
        plus_root: m + root,
        discriminant,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HSigmaEstimate {
    pub h_hat: f64,
    pub sigma_norm_sq_hat: f64,
    /// The two spacings `(α_n, 2α_n)`.
    pub scales_used: (f64, f64),
}

impl HSigmaEstimate {
    /// Plug-in noise level for the statistic.
    pub fn noise_level(&self) -> NoiseLevel {
        NoiseLevel {
            h: self.h_hat,
            sigma_norm_sq: self.sigma_norm_sq_hat,
            plug_in: true,
        }
    }
}

/// `ĥ = ½(1 + log₂(V₂/V₁))`, clamped to [`H_CLAMP`].
pub fn h_from_variations(v1: f64, v2: f64) -> f64 {
    (0.5 * (1.0 + (v2 / v1).log2())).clamp(H_CLAMP.0, H_CLAMP.1)
}

/// Quadratic variations at spacings `α_n` and `2α_n`.
pub fn estimate_h_sigma(obs_y: ArrayView2<'_, f64>, scheme: &ObservationScheme) -> Result<HSigmaEstimate, EstimationError> {
    let n = obs_y.ncols().saturating_sub(1);
    if n < 4 {
        return Err(EstimationError::TooFewObservations { needed: 4, got: n });
    }
    let sq = |a: usize, b: usize| -> f64 { obs_y.rows().into_iter().map(|r| (r[b] - r[a]).powi(2)).sum() };
    let v1 = (0..n).map(|k| sq(k, k + 1)).collect::<KahanSum>().value();
    let v2 = (0..n / 2).map(|j| sq(2 * j, 2 * j + 2)).collect::<KahanSum>().value();
    if v1 == 0.0 {
        return Err(EstimationError::ZeroVariation);
    }
    let alpha_n = scheme.alpha_n();
    let h_hat = h_from_variations(v1, v2);
    Ok(HSigmaEstimate {
        h_hat,
        sigma_norm_sq_hat: v1 / (n as f64 * alpha_n.powf(2.0 * h_hat)),
        scales_used: (alpha_n, 2.0 * alpha_n),
    })
}

/// Stationary drift moments `E|b(Ȳ;ϑ)|²`, `E⟨b(Ȳ;ϑ₀), b(Ȳ;ϑ)⟩` and `E|b(Ȳ;ϑ₀)|²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftMoments {
    pub b_sq: Vec<f64>,
    pub cross: Vec<f64>,
    pub b0_sq: f64,
    /// Standard error of `b0_sq` across oracle seeds.
    pub b0_sq_stderr: f64,
}

impl DriftMoments {
    /// `E|b(Ȳ;ϑ)|² − E|b(Ȳ;ϑ₀)|²`, the limit of `Q_n(ϑ)` for `H > 1/2`.
    pub fn fractional_limit(&self) -> Vec<f64> {
        self.b_sq.iter().map(|b| b - self.b0_sq).collect()
    }

    /// `E|b(Ȳ;ϑ₀) − b(Ȳ;ϑ)|²`, the limit of `Q_n(ϑ)` for `H = 1/2`.
    pub fn brownian_limit(&self) -> Vec<f64> {
        self.b_sq
            .iter()
            .zip(&self.cross)
            .map(|(b, c)| self.b0_sq - 2.0 * c + b)
            .collect()
    }
}

/// Oracle for the drift moments at each `ϑ` in `thetas`, averaged over
/// `oracle.seeds` independent long trajectories.
pub fn drift_moments(
    model: &dyn DriftModel,
    theta0: &[f64],
    noise: &NoiseModel,
    thetas: &[Vec<f64>],
    oracle: &OracleParams,
) -> Result<DriftMoments, EstimationError> {
    for t in thetas {
        model.param_box().check(t).map_err(SimulationError::from)?;
    }
    let d = model.dim();
    let drift = |x: &[f64], t: &[f64]| {
        let mut b = vec![0.0; d];
        model.drift(x, t, &mut b);
        b
    };
    let mut gs: Vec<Box<dyn Fn(&[f64]) -> f64 + Sync + '_>> = Vec::new();
    for t in thetas {
        let t = t.clone();
        gs.push(Box::new(move |x: &[f64]| drift(x, &t).iter().map(|v| v * v).sum()));
    }
    for t in thetas {
        let t = t.clone();
        gs.push(Box::new(move |x: &[f64]| {
            let b = drift(x, &t);
            let b0 = drift(x, theta0);
            b.iter().zip(&b0).map(|(a, c)| a * c).sum()
        }));
    }
    gs.push(Box::new(|x: &[f64]| drift(x, theta0).iter().map(|v| v * v).sum()));
    let refs: Vec<&(dyn Fn(&[f64]) -> f64 + Sync)> = gs.iter().map(|g| g.as_ref()).collect();

    let runs: Vec<Vec<f64>> = (0..oracle.seeds)
        .into_par_iter()
        .map(|i| {
            stationary_moments(
                model,
                theta0,
                noise,
                &refs,
                oracle.horizon,
                oracle.substeps_per_unit,
                oracle.burn_in,
                hash64(&[oracle.base_seed, i as u64]),
            )
        })
        .collect::<Result<_, _>>()?;
    let seeds = runs.len() as f64;
    let avg = |j: usize| runs.iter().map(|r| r[j]).sum::<f64>() / seeds;
    let q = thetas.len();
    let b0_sq = avg(2 * q);
    let b0_sq_stderr = if runs.len() > 1 {
        let var = runs.iter().map(|r| (r[2 * q] - b0_sq).powi(2)).sum::<f64>() / (seeds - 1.0);
        (var / seeds).sqrt()
    } else {
        f64::NAN
    };
    Ok(DriftMoments {
        b_sq: (0..q).map(avg).collect(),
        cross: (q..2 * q).map(avg).collect(),
        b0_sq,
        b0_sq_stderr,
    })
}

/// The `H > 1/2` limit `L(ϑ) = E|b(Ȳ;ϑ)|² − E|b(Ȳ;ϑ₀)|²` on `thetas`.
pub fn limit_curve(
    model: &dyn DriftModel,
    theta0: &[f64],
    noise: &NoiseModel,
    thetas: &[Vec<f64>],
    oracle: &OracleParams,
) -> Result<Vec<f64>, EstimationError> {
    Ok(drift_moments(model, theta0, noise, thetas, oracle)?.fractional_limit())
}

/// The `H = 1/2` limit `E|b(Ȳ;ϑ₀) − b(Ȳ;ϑ)|²` on `thetas`.
pub fn brownian_limit_curve(
    model: &dyn DriftModel,
    theta0: &[f64],
    noise: &NoiseModel,
    thetas: &[Vec<f64>],
    oracle: &OracleParams,
) -> Result<Vec<f64>, EstimationError> {
    Ok(drift_moments(model, theta0, noise, thetas, oracle)?.brownian_limit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fgn::{cumulate, sample_fgn, FgnSpec, HurstIndex};
    use crate::models::{model_by_name, LinearDrift};
    use crate::simulate::{default_burn_in, simulate_path, SimulationPlan};
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};

    fn hurst(v: f64) -> HurstIndex {
        HurstIndex::new(v).unwrap()
    }

    /// `b(x; ϑ) = (cϑ)·x`.
    struct ScaledLinear {
        c: f64,
        bounds: ParameterBox,
    }

    impl DriftModel for ScaledLinear {
        fn name(&self) -> &str {
            "scaled"
        }
        fn dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn param_box(&self) -> &ParameterBox {
            &self.bounds
        }
        fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
            out[0] = (self.c * theta[0]) * x[0];
        }
        fn jacobian_x(&self, _x: &[f64], theta: &[f64]) -> Array2<f64> {
            array![[self.c * theta[0]]]
        }
        fn jacobian_theta(&self, x: &[f64], _theta: &[f64]) -> Array2<f64> {
            array![[self.c * x[0]]]
        }
        fn potential(&self, x: &[f64], theta: &[f64]) -> f64 {
            0.5 * self.c * theta[0] * x[0] * x[0]
        }
    }

    fn fou_path(n: usize, h: f64, seed: u64) -> crate::simulate::PathRecord {
        let model = model_by_name("fou", None, None).unwrap();
        let noise = NoiseModel::isotropic(hurst(h), 1.0, 1).unwrap();
        let scheme = ObservationScheme::new(n, 0.5, 1.0).unwrap();
        let plan = SimulationPlan::new(scheme, vec![0.0], seed).with_burn_in(default_burn_in(model.as_ref(), &[-1.0]));
        simulate_path(model.as_ref(), &[-1.0], &noise, &plan).unwrap()
    }

    #[test]
    fn closed_form_hand_example() {
        let scheme = ObservationScheme::with_spacing(2, 0.5, 1.0).unwrap();
        let noise = NoiseLevel::new(0.5, 1.0).unwrap();
        let r = closed_form_fou(array![[1.0, 0.5, 0.6]].view(), &scheme, &noise).unwrap();
        assert_relative_eq!(r.theta_hat, -0.36 - (0.1296f64 + 1.392).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(r.theta_hat, -1.5935, epsilon = 1e-4);
        assert!(!r.clamped);
    }

    #[test]
    fn closed_form_errors_and_clamp() {
        let scheme = ObservationScheme::with_spacing(2, 0.5, 1.0).unwrap();
        let noise = NoiseLevel::new(0.5, 1.0).unwrap();
        assert_eq!(
            closed_form_fou(array![[0.0, 0.0, 0.0]].view(), &scheme, &noise),
            Err(EstimationError::DegeneratePath)
        );
        assert!(matches!(
            closed_form_fou(array![[0.0, 0.0], [0.0, 0.0]].view(), &scheme, &noise),
            Err(EstimationError::NotOneDimensional(2))
        ));
        // Large increments push S₃/(S₂α²) above m².
        let r = closed_form_fou(array![[1.0, 3.0, 1.0]].view(), &scheme, &noise).unwrap();
        assert!(r.clamped && r.discriminant < 0.0);
        assert_eq!(r.theta_hat, r.plus_root);
    }

    #[test]
    fn closed_form_root_zeroes_the_statistic() {
        let model = model_by_name("fou", None, Some(ParameterBox::interval(-50.0, 50.0).unwrap())).unwrap();
        for seed in 0..5 {
            let path = fou_path(1024, 0.7, seed);
            let input = StatisticInput::from_path(model.as_ref(), &path).unwrap();
            let r = closed_form_fou(path.obs_y.view(), path.scheme(), input.noise()).unwrap();
            if !r.clamped {
                assert!(q_n(&input, &[r.theta_hat]).abs() < 1e-9);
                assert!(q_n(&input, &[r.plus_root]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_decay_is_recovered_at_rate_alpha() {
        let theta0 = -1.0;
        let noise = NoiseLevel {
            h: 0.7,
            sigma_norm_sq: 0.0,
            plug_in: false,
        };
        let mut errors = Vec::new();
        for n in [64, 256, 1024, 4096] {
            let scheme = ObservationScheme::new(n, 0.5, 1.0).unwrap();
            let y: Vec<f64> = scheme.times().iter().map(|t| (theta0 * t).exp()).collect();
            let obs = Array2::from_shape_vec((1, n + 1), y).unwrap();
            let r = closed_form_fou(obs.view(), &scheme, &noise).unwrap();
            let err = (r.theta_hat - theta0).abs();
            assert!(err <= scheme.alpha_n(), "n {n}: err {err}");
            errors.push(err);
        }
        assert!(errors.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_squares_matches_closed_form() {
        let model = model_by_name("fou", None, None).unwrap();
        let scheme = ObservationScheme::with_spacing(2, 0.5, 1.0).unwrap();
        let noise = NoiseLevel::new(0.5, 1.0).unwrap();
        let obs = array![[1.0, 0.5, 0.6]];
        let input = StatisticInput::new(model.as_ref(), obs.view(), scheme, noise).unwrap();
        let cf = closed_form_fou(obs.view(), &scheme, &noise).unwrap();
        let zs = zero_squares(&input).unwrap();
        assert!((zs.theta_hat[0] - cf.theta_hat).abs() < 1e-6);
        assert!(zs.q_at_min.abs() <= q_n(&input, &zs.grid_stage_min).abs());

        for seed in 0..10 {
            let path = fou_path(2048, 0.7, 40 + seed);
            let input = StatisticInput::from_path(model.as_ref(), &path).unwrap();
            let cf = closed_form_fou(path.obs_y.view(), path.scheme(), input.noise()).unwrap();
            let zs = zero_squares(&input).unwrap();
            if cf.discriminant >= 1e-8 && model.param_box().contains(&[cf.theta_hat]) {
                assert!((zs.theta_hat[0] - cf.theta_hat).abs() < 1e-6, "seed {seed}: {zs:?} vs {cf:?}");
            }
            assert!(model.param_box().contains(&zs.theta_hat));
        }
    }

    #[test]
    fn argmin_scales_with_the_parametrisation() {
        let path = fou_path(1024, 0.7, 11);
        let base = ScaledLinear {
            c: 1.0,
            bounds: ParameterBox::interval(-3.0, -0.1).unwrap(),
        };
        let reference = zero_squares(&StatisticInput::from_path(&base, &path).unwrap()).unwrap();
        for c in [2.0, 0.25] {
            let scaled = ScaledLinear {
                c,
                bounds: ParameterBox::interval(-3.0 / c, -0.1 / c).unwrap(),
            };
            let r = zero_squares(&StatisticInput::from_path(&scaled, &path).unwrap()).unwrap();
            assert_eq!(r.theta_hat[0], reference.theta_hat[0] / c);
            assert_eq!(r.iterations, reference.iterations);
        }
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let path = fou_path(64, 0.7, 1);
        let model = model_by_name("fou", None, None).unwrap();
        let input = StatisticInput::from_path(model.as_ref(), &path).unwrap();
        let bad: ParameterBox = serde_json::from_str(r#"{"lower":[-1.0],"upper":[-1.0]}"#).unwrap();
        assert!(matches!(
            zero_squares_with(&input, &bad, &ZeroSquaresOptions::default()),
            Err(EstimationError::EmptyBox(_))
        ));
    }

    #[test]
    fn h_from_constructed_variations() {
        assert_relative_eq!(h_from_variations(1.0, 2f64.powf(0.4)), 0.7, epsilon = 1e-12);
        assert_eq!(h_from_variations(3.0, 3.0), 0.5);
        assert_eq!(h_from_variations(1.0, 1e-9), H_CLAMP.0);
    }

    #[test]
    fn h_sigma_on_fbm_path() {
        let n = 1 << 14;
        let scheme = ObservationScheme::new(n, 0.5, 1.0).unwrap();
        let spec = FgnSpec::new(hurst(0.75), scheme.alpha_n(), n, 1, 3).unwrap();
        let path = cumulate(&sample_fgn(&spec).unwrap());
        let est = estimate_h_sigma(path.view(), &scheme).unwrap();
        assert!((est.h_hat - 0.75).abs() < 0.05, "{est:?}");
        assert_eq!(est.scales_used, (scheme.alpha_n(), 2.0 * scheme.alpha_n()));
        assert!(est.noise_level().plug_in);
    }

    #[test]
    fn h_sigma_input_errors() {
        let scheme = ObservationScheme::new(8, 0.5, 1.0).unwrap();
        assert!(matches!(
            estimate_h_sigma(Array2::zeros((1, 4)).view(), &scheme),
            Err(EstimationError::TooFewObservations { .. })
        ));
        assert_eq!(
            estimate_h_sigma(Array2::ones((1, 9)).view(), &scheme),
            Err(EstimationError::ZeroVariation)
        );
    }

    #[test]
    fn brownian_limit_at_theta_minus_two() {
        let model = model_by_name("fou", None, None).unwrap();
        let noise = NoiseModel::isotropic(hurst(0.5), 1.0, 1).unwrap();
        let thetas = vec![vec![-2.0], vec![-1.0]];
        let oracle = OracleParams {
            horizon: 2_000.0,
            ..Default::default()
        };
        let m = drift_moments(model.as_ref(), &[-1.0], &noise, &thetas, &oracle).unwrap();
        let l = m.fractional_limit();
        // (ϑ² − ϑ₀²)·E[Ȳ²] = 3·0.5
        assert_relative_eq!(l[0], 1.5, max_relative = 0.1);
        assert_eq!(l[1], 0.0);
        let bl = m.brownian_limit();
        assert_relative_eq!(bl[0], 0.5, max_relative = 0.1);
        assert!(bl[1].abs() < 1e-12);
    }

    #[test]
    fn fractional_limit_changes_sign_at_the_true_modulus() {
        let model = model_by_name("fou", None, None).unwrap();
        let noise = NoiseModel::isotropic(hurst(0.7), 1.0, 1).unwrap();
        let thetas: Vec<Vec<f64>> = [-3.0, -2.0, -1.5, -0.8, -0.5, -0.1].iter().map(|t| vec![*t]).collect();
        let oracle = OracleParams {
            horizon: 1_000.0,
            seeds: 4,
            ..Default::default()
        };
        let l = limit_curve(model.as_ref(), &[-1.0], &noise, &thetas, &oracle).unwrap();
        for (t, v) in thetas.iter().zip(&l) {
            assert_eq!(v.signum(), (t[0] * t[0] - 1.0).signum(), "theta {t:?}: {v}");
        }
    }

    #[test]
    fn limit_curve_rejects_theta_outside_box() {
        let model = model_by_name("fou", None, None).unwrap();
        let noise = NoiseModel::isotropic(hurst(0.7), 1.0, 1).unwrap();
        let r = limit_curve(model.as_ref(), &[-1.0], &noise, &[vec![0.5]], &OracleParams::default());
        assert!(matches!(r, Err(EstimationError::Simulation(_))));
    }

    #[test]
    fn linear_drift_is_usable_directly() {
        let model = LinearDrift::new("lin", 1, ParameterBox::interval(-3.0, -0.1).unwrap()).unwrap();
        let path = fou_path(512, 0.7, 2);
        let r = zero_squares(&StatisticInput::from_path(&model, &path).unwrap()).unwrap();
        assert!(r.converged);
    }
}
