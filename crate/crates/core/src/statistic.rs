//! The zero-squares statistic
//!
//! ```text
//! Q_n(ϑ) = 1/(n α_n²) Σ_{k<n} ( |δY_k − b(Y_{t_k}; ϑ) α_n|² − ‖σ‖² α_n^{2H} )
//! ```
//!
//! and, in simulation mode, its split `Q = Q⁽¹⁾ − 2Q⁽²⁾ + Q⁽³⁾ + R` into a
//! drift-mismatch term, a drift/noise cross term, the normalised quadratic
//! variation of the noise and a remainder driven by the within-gap drift
//! variation `r_k`.
//!
//! The remainder reported by [`decompose`] is a finite-n quantity: besides the
//! terms that vanish as `n → ∞` it carries the left-point quadrature of `r_k`
//! on the fine grid.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{DriftModel, NoiseModel};
use crate::numeric::KahanSum;
use crate::simulate::{ObservationScheme, PathRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatisticError {
    #[error("observations have shape {got:?}, expected ({rows}, {cols})")]
    ShapeMismatch { got: (usize, usize), rows: usize, cols: usize },
    #[error("path carries no fine grid; simulate with keep_fine to decompose")]
    MissingFineGrid,
    #[error("invalid noise level: {0}")]
    InvalidNoise(String),
}

/// The two noise quantities the statistic needs: `H` and `‖σ‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub h: f64,
    pub sigma_norm_sq: f64,
    /// Set when `(h, sigma_norm_sq)` were estimated from the data.
    #[serde(default)]
    pub plug_in: bool,
}

impl NoiseLevel {
    pub fn new(h: f64, sigma_norm_sq: f64) -> Result<Self, StatisticError> {
        if !(h > 0.0 && h < 1.0) {
            return Err(StatisticError::InvalidNoise(format!("H must lie in (0, 1), got {h}")));
        }
        if !(sigma_norm_sq > 0.0 && sigma_norm_sq.is_finite()) {
            return Err(StatisticError::InvalidNoise(format!(
                "squared sigma norm must be positive, got {sigma_norm_sq}"
            )));
        }
        Ok(Self { h, sigma_norm_sq, plug_in: false })
    }

    /// Expected squared increment norm `‖σ‖² α^{2H}` over a gap of length `alpha_n`.
    pub fn increment_variance(&self, alpha_n: f64) -> f64 {
        self.sigma_norm_sq * alpha_n.powf(2.0 * self.h)
    }
}

impl From<&NoiseModel> for NoiseLevel {
    fn from(noise: &NoiseModel) -> Self {
        Self {
            h: noise.hurst().value(),
            sigma_norm_sq: noise.sigma_norm_sq(),
            plug_in: false,
        }
    }
}

/// Observations prepared for repeated evaluation of `Q_n`.
///
/// States are stored time-major so that `Y_{t_k}` is a contiguous slice.
#[derive(Clone)]
pub struct StatisticInput<'a> {
    model: &'a dyn DriftModel,
    scheme: ObservationScheme,
    noise: NoiseLevel,
    states: Vec<f64>,
    increments: Vec<f64>,
}

impl<'a> StatisticInput<'a> {
    pub fn new(
        model: &'a dyn DriftModel,
        obs_y: ArrayView2<'_, f64>,
        scheme: ObservationScheme,
        noise: NoiseLevel,
    ) -> Result<Self, StatisticError> {
        let d = model.dim();
        let n = scheme.n();
        if obs_y.dim() != (d, n + 1) {
            return Err(StatisticError::ShapeMismatch {
                got: obs_y.dim(),
                rows: d,
                cols: n + 1,
            });
        }
        let states: Vec<f64> = obs_y.t().iter().copied().collect();
        let increments = (0..n * d).map(|i| states[i + d] - states[i]).collect();
        Ok(Self {
            model,
            scheme,
            noise,
            states,
            increments,
        })
    }

    /// Input built from a simulated path with its true noise parameters.
    pub fn from_path(model: &'a dyn DriftModel, path: &PathRecord) -> Result<Self, StatisticError> {
        Self::new(model, path.obs_y.view(), path.plan.scheme, NoiseLevel::from(&path.noise))
    }

    pub fn model(&self) -> &'a dyn DriftModel {
        self.model
    }

    pub fn scheme(&self) -> &ObservationScheme {
        &self.scheme
    }

    pub fn noise(&self) -> &NoiseLevel {
        &self.noise
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn n(&self) -> usize {
        self.scheme.n()
    }

    /// `Y_{t_k}`.
    pub fn state(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.states[k * d..(k + 1) * d]
    }

    /// `δY_k = Y_{t_{k+1}} − Y_{t_k}`.
    pub fn increment(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.increments[k * d..(k + 1) * d]
    }
}

/// `Q_n(ϑ)`. Not restricted to the parameter box.
pub fn q_n(input: &StatisticInput<'_>, theta: &[f64]) -> f64 {
    let d = input.dim();
    let n = input.n();
    let alpha_n = input.scheme.alpha_n();
    let centre = input.noise.increment_variance(alpha_n);
    let mut b = vec![0.0; d];
    let mut acc = KahanSum::new();
    for k in 0..n {
        input.model.drift(input.state(k), theta, &mut b);
        let dy = input.increment(k);
        let sq: f64 = (0..d).map(|i| (dy[i] - b[i] * alpha_n).powi(2)).sum();
        acc.add(sq - centre);
    }
    acc.value() / (n as f64 * alpha_n * alpha_n)
}

/// Components of `Q_n(ϑ) = Q⁽¹⁾ − 2Q⁽²⁾ + Q⁽³⁾ + R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatisticDecomposition {
    pub q: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    /// `q − (q1 − 2·q2 + q3)`.
    pub residual: f64,
}

/// The three sums in `R` built from `r_k = ∫_{t_k}^{t_{k+1}} (b(Y_u;ϑ₀) − b(Y_{t_k};ϑ₀)) du`:
/// `rr = Σ|r|²/(nα²)`, `rb = 2Σ⟨δb, r⟩/(nα)`, `rf = 2Σ⟨δF, r⟩/(nα²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemainderTerms {
    pub rr: f64,
    pub rb: f64,
    pub rf: f64,
    /// `rr − rb + rf`.
    pub total: f64,
}

fn check_noise_shape(input: &StatisticInput<'_>, noise: ArrayView2<'_, f64>) -> Result<(), StatisticError> {
    let (d, n) = (input.dim(), input.n());
    if noise.dim() != (d, n + 1) {
        return Err(StatisticError::ShapeMismatch {
            got: noise.dim(),
            rows: d,
            cols: n + 1,
        });
    }
    Ok(())
}

/// Diagnostic decomposition at `theta` for a simulated path with truth `theta0`.
pub fn decompose(
    input: &StatisticInput<'_>,
    theta: &[f64],
    theta0: &[f64],
    path: &PathRecord,
) -> Result<StatisticDecomposition, StatisticError> {
    check_noise_shape(input, path.obs_noise.view())?;
    let d = input.dim();
    let n = input.n();
    let alpha_n = input.scheme.alpha_n();
    let centre = input.noise.increment_variance(alpha_n);
    let mut b = vec![0.0; d];
    let mut b0 = vec![0.0; d];
    let (mut s1, mut s2, mut s3) = (KahanSum::new(), KahanSum::new(), KahanSum::new());
    for k in 0..n {
        let y = input.state(k);
        input.model.drift(y, theta, &mut b);
        input.model.drift(y, theta0, &mut b0);
        let mut db_sq = 0.0;
        let mut cross = 0.0;
        let mut df_sq = 0.0;
        for i in 0..d {
            let db = b[i] - b0[i];
            let df = path.obs_noise[[i, k + 1]] - path.obs_noise[[i, k]];
            db_sq += db * db;
            cross += db * df;
            df_sq += df * df;
        }
        s1.add(db_sq);
        s2.add(cross);
        s3.add(df_sq - centre);
    }
    let nf = n as f64;
    let q = q_n(input, theta);
    let q1 = s1.value() / nf;
    let q2 = s2.value() / (nf * alpha_n);
    let q3 = s3.value() / (nf * alpha_n * alpha_n);
    Ok(StatisticDecomposition {
        q,
        q1,
        q2,
        q3,
        residual: q - (q1 - 2.0 * q2 + q3),
    })
}

/// `r_k` for every gap, time-major `n × d`, by the left-point rule on the fine grid.
pub fn within_gap_drift(input: &StatisticInput<'_>, theta0: &[f64], path: &PathRecord) -> Result<Array2<f64>, StatisticError> {
    let fine = path.fine.as_ref().ok_or(StatisticError::MissingFineGrid)?;
    let d = input.dim();
    let n = input.n();
    let s = path.plan.substeps;
    if fine.y.dim() != (d, n * s + 1) {
        return Err(StatisticError::ShapeMismatch {
            got: fine.y.dim(),
            rows: d,
            cols: n * s + 1,
        });
    }
    let step = path.plan.fine_step();
    let mut r = Array2::zeros((n, d));
    let mut bk = vec![0.0; d];
    let mut bu = vec![0.0; d];
    let mut yu = vec![0.0; d];
    for k in 0..n {
        input.model.drift(input.state(k), theta0, &mut bk);
        for i in 1..s {
            for (c, v) in yu.iter_mut().enumerate() {
                *v = fine.y[[c, k * s + i]];
            }
            input.model.drift(&yu, theta0, &mut bu);
            for c in 0..d {
                r[[k, c]] += bu[c] - bk[c];
            }
        }
        for c in 0..d {
            r[[k, c]] *= step;
        }
    }
    Ok(r)
}

/// The remainder sums recomputed directly from `r_k`.
pub fn remainder_terms(
    input: &StatisticInput<'_>,
    theta: &[f64],
    theta0: &[f64],
    path: &PathRecord,
) -> Result<RemainderTerms, StatisticError> {
    check_noise_shape(input, path.obs_noise.view())?;
    let r = within_gap_drift(input, theta0, path)?;
    let d = input.dim();
    let n = input.n();
    let alpha_n = input.scheme.alpha_n();
    let mut b = vec![0.0; d];
    let mut b0 = vec![0.0; d];
    let (mut rr, mut rb, mut rf) = (KahanSum::new(), KahanSum::new(), KahanSum::new());
    for k in 0..n {
        let y = input.state(k);
        input.model.drift(y, theta, &mut b);
        input.model.drift(y, theta0, &mut b0);
        for i in 0..d {
            let rk = r[[k, i]];
            let df = path.obs_noise[[i, k + 1]] - path.obs_noise[[i, k]];
            rr.add(rk * rk);
            rb.add((b[i] - b0[i]) * rk);
            rf.add(df * rk);
        }
    }
    let nf = n as f64;
    let rr = rr.value() / (nf * alpha_n * alpha_n);
    let rb = 2.0 * rb.value() / (nf * alpha_n);
    let rf = 2.0 * rf.value() / (nf * alpha_n * alpha_n);
    Ok(RemainderTerms {
        rr,
        rb,
        rf,
        total: rr - rb + rf,
    })
}

/// `Q⁽³⁾` of the columns of `obs`: `1/(nα²) Σ (|δF_k|² − ‖σ‖²α^{2H})`.
pub fn qv_statistic(obs: ArrayView2<'_, f64>, scheme: &ObservationScheme, noise: &NoiseLevel) -> f64 {
    let n = obs.ncols() - 1;
    let alpha_n = scheme.alpha_n();
    let centre = noise.increment_variance(alpha_n);
    let acc: KahanSum = (0..n)
        .map(|k| {
            let sq: f64 = obs.rows().into_iter().map(|row| (row[k + 1] - row[k]).powi(2)).sum();
            sq - centre
        })
        .collect();
    acc.value() / (n as f64 * alpha_n * alpha_n)
}

/// `(1/n) Σ (x_k² − 1)` for unit-variance increments.
pub fn unit_qv_deviation(increments: &[f64]) -> f64 {
    let acc: KahanSum = increments.iter().map(|x| x * x - 1.0).collect();
    acc.value() / increments.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fgn::{sample_fgn, FgnSpec, HurstIndex};
    use crate::models::{model_by_name, LinearDrift, ParameterBox};
    use crate::numeric::mean;
    use crate::simulate::{default_burn_in, simulate_path, SimulationPlan};
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn linear(lo: f64, hi: f64) -> LinearDrift {
        LinearDrift::new("lin", 1, ParameterBox::interval(lo, hi).unwrap()).unwrap()
    }

    fn unit_scheme(n: usize) -> ObservationScheme {
        ObservationScheme::with_spacing(n, 0.5, 1.0).unwrap()
    }

    #[test]
    fn hand_evaluated_example() {
        let model = linear(-1.0, 1.0);
        let obs = array![[1.0, 0.5, 0.6]];
        let input = StatisticInput::new(&model, obs.view(), unit_scheme(2), NoiseLevel::new(0.5, 1.0).unwrap()).unwrap();
        assert_relative_eq!(q_n(&input, &[0.0]), -0.87, epsilon = 1e-14);
    }

    #[test]
    fn exact_drift_leaves_only_the_centring() {
        // δY_k = ϑ Y_k α_n for every k
        let theta = -0.7;
        let scheme = ObservationScheme::new(50, 0.5, 1.0).unwrap();
        let a = scheme.alpha_n();
        let mut y = vec![2.0];
        for k in 0..50 {
            let next = y[k] + theta * y[k] * a;
            y.push(next);
        }
        let obs = Array2::from_shape_vec((1, 51), y).unwrap();
        let noise = NoiseLevel::new(0.7, 1.3).unwrap();
        let model = linear(-1.0, 1.0);
        let input = StatisticInput::new(&model, obs.view(), scheme, noise).unwrap();
        assert_relative_eq!(q_n(&input, &[theta]), -1.3 * a.powf(1.4 - 2.0), max_relative = 1e-12);
    }

    #[test]
    fn shape_is_validated() {
        let model = linear(-1.0, 1.0);
        let obs = array![[1.0, 0.5]];
        let err = StatisticInput::new(&model, obs.view(), unit_scheme(2), NoiseLevel::new(0.5, 1.0).unwrap());
        assert!(matches!(err, Err(StatisticError::ShapeMismatch { .. })));
        assert!(NoiseLevel::new(1.0, 1.0).is_err());
        assert!(NoiseLevel::new(0.7, 0.0).is_err());
    }

    #[test]
    fn qv_examples() {
        let scheme = unit_scheme(1);
        let noise = NoiseLevel::new(0.8, 1.0).unwrap();
        assert_eq!(qv_statistic(array![[0.0, 2.0]].view(), &scheme, &noise), 3.0);

        let scheme = ObservationScheme::new(4, 0.5, 1.0).unwrap();
        let noise = NoiseLevel::new(0.7, 2.0).unwrap();
        let step = noise.increment_variance(scheme.alpha_n()).sqrt();
        let path = array![[0.0, step, 0.0, -step, 0.0]];
        assert!(qv_statistic(path.view(), &scheme, &noise).abs() < 1e-12);
    }

    fn simulated(n: usize, h: f64, seed: u64, theta0: f64, y0: f64, burn: bool) -> (PathRecord, LinearDrift) {
        let model = linear(-3.0, 1.0);
        let noise = NoiseModel::isotropic(HurstIndex::new(h).unwrap(), 1.0, 1).unwrap();
        let scheme = ObservationScheme::new(n, 0.5, 1.0).unwrap();
        let mut plan = SimulationPlan::new(scheme, vec![y0], seed).keeping_fine();
        if burn {
            plan = plan.with_burn_in(default_burn_in(&model, &[theta0]));
        }
        (simulate_path(&model, &[theta0], &noise, &plan).unwrap(), model)
    }

    #[test]
    fn decomposition_at_truth_has_no_drift_terms() {
        let (path, model) = simulated(512, 0.7, 3, -1.0, 0.0, true);
        let input = StatisticInput::from_path(&model, &path).unwrap();
        let dec = decompose(&input, &[-1.0], &[-1.0], &path).unwrap();
        assert_eq!(dec.q1, 0.0);
        assert_eq!(dec.q2, 0.0);
        assert_eq!(dec.q, q_n(&input, &[-1.0]));
    }

    #[test]
    fn zero_drift_has_no_remainder() {
        let (path, model) = simulated(512, 0.7, 4, 0.0, 0.0, false);
        let input = StatisticInput::from_path(&model, &path).unwrap();
        let dec = decompose(&input, &[0.0], &[0.0], &path).unwrap();
        assert_eq!(dec.residual, 0.0);
        assert_eq!(dec.q, dec.q3);
        let rem = remainder_terms(&input, &[0.0], &[0.0], &path).unwrap();
        assert_eq!(rem.total, 0.0);
    }

    #[test]
    fn decomposition_identity_matches_direct_remainder() {
        let (path, model) = simulated(1024, 0.7, 5, -1.0, 0.3, true);
        let input = StatisticInput::from_path(&model, &path).unwrap();
        for theta in [-3.0, -1.7, -1.0, -0.4, 0.5] {
            let dec = decompose(&input, &[theta], &[-1.0], &path).unwrap();
            let rem = remainder_terms(&input, &[theta], &[-1.0], &path).unwrap();
            assert_relative_eq!(dec.residual, rem.total, max_relative = 1e-10);
        }
    }

    #[test]
    fn missing_fine_grid_is_reported() {
        let (mut path, model) = simulated(64, 0.7, 6, -1.0, 0.0, false);
        path.fine = None;
        let input = StatisticInput::from_path(&model, &path).unwrap();
        assert_eq!(
            remainder_terms(&input, &[-1.0], &[-1.0], &path),
            Err(StatisticError::MissingFineGrid)
        );
    }

    #[test]
    fn residual_is_the_cross_term_bias() {
        // The remainder is dominated by 2Σ⟨δF, r⟩/(nα²), whose mean is ϑ₀ α_n^{2H−1}.
        let n = 1 << 12;
        let h = 0.7;
        let alpha_n = ObservationScheme::new(n, 0.5, 1.0).unwrap().alpha_n();
        let predicted = -alpha_n.powf(2.0 * h - 1.0);
        let residuals: Vec<f64> = (0..16)
            .map(|seed| {
                let (path, model) = simulated(n, h, 100 + seed, -1.0, 0.0, true);
                let input = StatisticInput::from_path(&model, &path).unwrap();
                decompose(&input, &[-2.0], &[-1.0], &path).unwrap().residual
            })
            .collect();
        let m = mean(&residuals);
        assert!((m - predicted).abs() < 0.25 * predicted.abs(), "mean residual {m}, predicted {predicted}");
    }

    #[test]
    fn off_diagonal_sum_matches_half_difference_of_variations() {
        let h = HurstIndex::new(0.7).unwrap();
        let n = 64;
        let reps = 2000;
        let mut cross = Vec::with_capacity(reps);
        let mut diff = Vec::with_capacity(reps);
        for rep in 0..reps as u64 {
            let pair = sample_fgn(&FgnSpec::new(h, 1.0, n, 2, 2 * rep).unwrap()).unwrap().into_inner();
            let fresh = sample_fgn(&FgnSpec::new(h, 1.0, n, 2, 2 * rep + 1).unwrap()).unwrap().into_inner();
            cross.push((0..n).map(|k| pair[[0, k]] * pair[[1, k]]).sum::<f64>());
            let qv = |r: usize| (0..n).map(|k| fresh[[r, k]].powi(2)).sum::<f64>();
            diff.push(0.5 * (qv(0) - qv(1)));
        }
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let fourth = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / v.len() as f64
        };
        let se = |v: &[f64]| ((fourth(v) - var(v).powi(2)) / v.len() as f64).sqrt();
        let (a, b) = (var(&cross), var(&diff));
        let tol = 3.0 * (se(&cross).powi(2) + se(&diff).powi(2)).sqrt();
        assert!((a - b).abs() < tol, "cross {a}, half difference {b}, tol {tol}");
    }

    #[test]
    fn unit_qv_deviation_values() {
        assert_eq!(unit_qv_deviation(&[1.0, -1.0]), 0.0);
        assert_eq!(unit_qv_deviation(&[2.0, 0.0]), 1.0);
    }

    #[test]
    fn builtin_quartic_decomposes() {
        let model = model_by_name("langevin-quartic", None, None).unwrap();
        let noise = NoiseModel::isotropic(HurstIndex::new(0.7).unwrap(), 0.5, 1).unwrap();
        let scheme = ObservationScheme::new(256, 0.5, 1.0).unwrap();
        let plan = SimulationPlan::new(scheme, vec![0.0], 9).keeping_fine();
        let path = simulate_path(model.as_ref(), &[1.0], &noise, &plan).unwrap();
        let input = StatisticInput::from_path(model.as_ref(), &path).unwrap();
        let dec = decompose(&input, &[2.0], &[1.0], &path).unwrap();
        let rem = remainder_terms(&input, &[2.0], &[1.0], &path).unwrap();
        assert_relative_eq!(dec.residual, rem.total, max_relative = 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn linear_drift_gives_exact_quadratic(seed in 0u64..1000, t in proptest::collection::vec(-3.0f64..1.0, 4)) {
            let (path, model) = simulated(128, 0.7, seed, -1.0, 0.5, false);
            let input = StatisticInput::from_path(&model, &path).unwrap();
            prop_assume!((t[0] - t[1]).abs() > 0.1 && (t[0] - t[2]).abs() > 0.1 && (t[1] - t[2]).abs() > 0.1);
            let q: Vec<f64> = t.iter().map(|&x| q_n(&input, &[x])).collect();
            // Lagrange interpolation through the first three points.
            let l = |i: usize, j: usize, k: usize| q[i] * (t[3] - t[j]) * (t[3] - t[k]) / ((t[i] - t[j]) * (t[i] - t[k]));
            let predicted = l(0, 1, 2) + l(1, 0, 2) + l(2, 0, 1);
            let scale = q.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!((predicted - q[3]).abs() <= 1e-10 * scale);
        }
    }
}
