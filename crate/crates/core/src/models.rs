//! Gradient-type drift families `b(x; ϑ) = ∂_x U(x; ϑ)` and sampled checkers
//! for the structural conditions the estimator relies on.
//!
//! The conditions (dissipativity, gradient structure, Jacobian consistency)
//! are global analytic statements. The checkers here only sample them, so a
//! model that passes is trusted, not certified.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fgn::HurstIndex;
use crate::rng::stream_rng;

/// Central finite-difference step used by the checkers.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model name {0:?}")]
    UnknownModelName(String),
    #[error("parameter box is empty or malformed: {0}")]
    EmptyBox(String),
    #[error("parameter {theta:?} lies outside the box")]
    OutsideBox { theta: Vec<f64> },
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
}

/// Axis-aligned compact parameter set `Θ = Π [lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParameterBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(ModelError::EmptyBox(format!(
                "bound lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ModelError::EmptyBox(format!("axis {i}: [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lower: f64, upper: f64) -> Result<Self, ModelError> {
        Self::new(vec![lower], vec![upper])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (lo, hi))| *lo <= *t && *t <= *hi)
    }

    pub fn project(&self, theta: &mut [f64]) {
        for (t, (lo, hi)) in theta.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *t = t.clamp(*lo, *hi);
        }
    }

    pub fn check(&self, theta: &[f64]) -> Result<(), ModelError> {
        if self.contains(theta) {
            Ok(())
        } else {
            Err(ModelError::OutsideBox { theta: theta.to_vec() })
        }
    }

    /// Point `index` (lexicographic, last axis fastest) of the uniform grid
    /// with `points` nodes per axis, endpoints included.
    pub fn grid_point(&self, points: usize, index: usize) -> Vec<f64> {
        let mut rem = index;
        let mut out = vec![0.0; self.dim()];
        for axis in (0..self.dim()).rev() {
            let i = rem % points;
            rem /= points;
            out[axis] = self.axis_node(axis, points, i);
        }
        out
    }

    pub fn grid_len(&self, points: usize) -> usize {
        points.pow(self.dim() as u32)
    }

    fn axis_node(&self, axis: usize, points: usize, i: usize) -> f64 {
        let (lo, hi) = (self.lower[axis], self.upper[axis]);
        if points <= 1 {
            return 0.5 * (lo + hi);
        }
        if i + 1 == points {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (points - 1) as f64
        }
    }
}

/// A parametric drift family of gradient type.
///
/// Evaluators take the state `x` (length [`DriftModel::dim`]) and parameter
/// `theta` (length [`DriftModel::param_dim`]) and must be pure.
pub trait DriftModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn param_box(&self) -> &ParameterBox;

    /// Writes `b(x; θ)` into `out`.
    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]);

    /// `∂_x b(x; θ)`, `d × d`.
    fn jacobian_x(&self, x: &[f64], theta: &[f64]) -> Array2<f64>;

    /// `∂_θ b(x; θ)`, `d × q`.
    fn jacobian_theta(&self, x: &[f64], theta: &[f64]) -> Array2<f64>;

    /// Potential `U` with `∂_x U = b`.
    fn potential(&self, x: &[f64], theta: &[f64]) -> f64;

    /// Analytic dissipativity constant `c₁(θ)` at a single parameter, if known.
    fn contraction_rate(&self, _theta: &[f64]) -> Option<f64> {
        None
    }

    /// Analytic dissipativity constant valid uniformly over the box, if known.
    fn dissipativity_constant(&self) -> Option<f64> {
        None
    }

    fn drift_vec(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.drift(x, theta, &mut out);
        out
    }
}

/// `b(x; θ) = θ·x` on `R^d` with scalar `θ < 0`; the fractional Ornstein–Uhlenbeck drift.
#[derive(Debug, Clone)]
pub struct LinearDrift {
    name: String,
    dim: usize,
    bounds: ParameterBox,
}

impl LinearDrift {
    pub fn new(name: impl Into<String>, dim: usize, bounds: ParameterBox) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidDimension("state dimension must be at least 1".into()));
        }
        if bounds.dim() != 1 {
            return Err(ModelError::InvalidDimension("linear drift has one parameter".into()));
        }
        Ok(Self {
            name: name.into(),
            dim,
            bounds,
        })
    }
}

impl DriftModel for LinearDrift {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn param_box(&self) -> &ParameterBox {
        &self.bounds
    }
    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = theta[0] * xi;
        }
    }
    fn jacobian_x(&self, _x: &[f64], theta: &[f64]) -> Array2<f64> {
        Array2::eye(self.dim) * theta[0]
    }
    fn jacobian_theta(&self, x: &[f64], _theta: &[f64]) -> Array2<f64> {
        Array1::from(x.to_vec()).into_shape_with_order((self.dim, 1)).unwrap()
    }
    fn potential(&self, x: &[f64], theta: &[f64]) -> f64 {
        0.5 * theta[0] * x.iter().map(|v| v * v).sum::<f64>()
    }
    fn contraction_rate(&self, theta: &[f64]) -> Option<f64> {
        Some(-theta[0])
    }
    fn dissipativity_constant(&self) -> Option<f64> {
        Some(-self.bounds.upper()[0])
    }
}

/// `b(x; θ) = −θ (x + |x|² x)`, gradient of `U = −θ(|x|²/2 + |x|⁴/4)`, with `θ > 0`.
#[derive(Debug, Clone)]
pub struct QuarticLangevin {
    dim: usize,
    bounds: ParameterBox,
}

impl QuarticLangevin {
    pub fn new(dim: usize, bounds: ParameterBox) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidDimension("state dimension must be at least 1".into()));
        }
        if bounds.dim() != 1 {
            return Err(ModelError::InvalidDimension("quartic Langevin drift has one parameter".into()));
        }
        Ok(Self { dim, bounds })
    }
}

impl DriftModel for QuarticLangevin {
    fn name(&self) -> &str {
        "langevin-quartic"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn param_box(&self) -> &ParameterBox {
        &self.bounds
    }
    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -theta[0] * xi * (1.0 + r2);
        }
    }
    fn jacobian_x(&self, x: &[f64], theta: &[f64]) -> Array2<f64> {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        Array2::from_shape_fn((self.dim, self.dim), |(i, j)| {
            let diag = if i == j { 1.0 + r2 } else { 0.0 };
            -theta[0] * (diag + 2.0 * x[i] * x[j])
        })
    }
    fn jacobian_theta(&self, x: &[f64], _theta: &[f64]) -> Array2<f64> {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        Array2::from_shape_fn((self.dim, 1), |(i, _)| -x[i] * (1.0 + r2))
    }
    fn potential(&self, x: &[f64], theta: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        -theta[0] * (0.5 * r2 + 0.25 * r2 * r2)
    }
    fn contraction_rate(&self, theta: &[f64]) -> Option<f64> {
        Some(theta[0])
    }
    fn dissipativity_constant(&self) -> Option<f64> {
        Some(self.bounds.lower()[0])
    }
}

/// Catalog entry for a builtin model.
pub struct ModelEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub default_dim: usize,
    pub default_box: (f64, f64),
    build: fn(usize, ParameterBox) -> Result<Arc<dyn DriftModel>, ModelError>,
}

impl ModelEntry {
    /// Builds the model; `bounds` overrides the default box.
    pub fn build(&self, dim: Option<usize>, bounds: Option<ParameterBox>) -> Result<Arc<dyn DriftModel>, ModelError> {
        let bounds = match bounds {
            Some(b) => b,
            None => ParameterBox::interval(self.default_box.0, self.default_box.1)?,
        };
        (self.build)(dim.unwrap_or(self.default_dim), bounds)
    }
}

const CATALOG: &[ModelEntry] = &[
    ModelEntry {
        name: "fou",
        description: "fractional Ornstein-Uhlenbeck, b(x;t) = t*x, d = 1",
        default_dim: 1,
        default_box: (-3.0, -0.1),
        build: |dim, bounds| {
            if dim != 1 {
                return Err(ModelError::InvalidDimension("fou is one-dimensional; use fou-multi".into()));
            }
            Ok(Arc::new(LinearDrift::new("fou", 1, bounds)?))
        },
    },
    ModelEntry {
        name: "langevin-quartic",
        description: "quartic gradient Langevin, b(x;t) = -t*(x + |x|^2 x)",
        default_dim: 1,
        default_box: (0.1, 3.0),
        build: |dim, bounds| Ok(Arc::new(QuarticLangevin::new(dim, bounds)?)),
    },
    ModelEntry {
        name: "fou-multi",
        description: "d-dimensional fractional Ornstein-Uhlenbeck, b(x;t) = t*x",
        default_dim: 2,
        default_box: (-3.0, -0.1),
        build: |dim, bounds| Ok(Arc::new(LinearDrift::new("fou-multi", dim, bounds)?)),
    },
];

/// The builtin model catalog, keyed by stable names.
pub fn builtin_models() -> &'static [ModelEntry] {
    CATALOG
}

pub fn model_by_name(
    name: &str,
    dim: Option<usize>,
    bounds: Option<ParameterBox>,
) -> Result<Arc<dyn DriftModel>, ModelError> {
    CATALOG
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| ModelError::UnknownModelName(name.to_string()))?
        .build(dim, bounds)
}

/// Hurst index plus diffusion columns `σ_1..σ_m` stacked into a `d × m` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    h: HurstIndex,
    sigma: Array2<f64>,
    sigma_norm_sq: f64,
}

impl NoiseModel {
    pub fn new(h: HurstIndex, sigma: Array2<f64>) -> Result<Self, ModelError> {
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidNoise("sigma has non-finite entries".into()));
        }
        let sigma_norm_sq: f64 = sigma.iter().map(|v| v * v).sum();
        if sigma_norm_sq <= 0.0 || sigma.ncols() == 0 {
            return Err(ModelError::InvalidNoise("sigma must be nonzero".into()));
        }
        Ok(Self { h, sigma, sigma_norm_sq })
    }

    /// `σ = s·I_d` (so `m = d`).
    pub fn isotropic(h: HurstIndex, scale: f64, dim: usize) -> Result<Self, ModelError> {
        Self::new(h, Array2::eye(dim) * scale)
    }

    pub fn hurst(&self) -> HurstIndex {
        self.h
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// Number of fBm components `m`.
    pub fn components(&self) -> usize {
        self.sigma.ncols()
    }

    /// `‖σ‖² = Σ_j |σ_j|²`.
    pub fn sigma_norm_sq(&self) -> f64 {
        self.sigma_norm_sq
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissipativityReport {
    /// Largest observed `⟨b(x)−b(y), x−y⟩ / |x−y|²`; dissipativity asks for it to be ≤ −c₁.
    pub max_ratio: f64,
    pub pairs_used: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifferenceReport {
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub max_abs_err_x: f64,
    pub max_abs_err_theta: f64,
    pub pass: bool,
}

/// Number of grid nodes per parameter axis used by the dissipativity checker.
const CHECK_GRID: usize = 5;

fn uniform_in_ball<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / dim as f64);
    dir.into_iter().map(|v| r * v / norm).collect()
}

fn uniform_in_box<R: Rng>(rng: &mut R, bounds: &ParameterBox) -> Vec<f64> {
    bounds
        .lower()
        .iter()
        .zip(bounds.upper())
        .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
        .collect()
}

/// Samples `⟨b(x;θ)−b(y;θ), x−y⟩ / |x−y|²` over random pairs in the ball of
/// `radius` and parameters on a grid over the box; passes when the maximum is
/// at most `−c1_floor`. Pairs closer than `1e-12` are skipped.
pub fn check_dissipativity(
    model: &dyn DriftModel,
    sample_count: usize,
    radius: f64,
    c1_floor: f64,
    seed: u64,
) -> DissipativityReport {
    assert!(sample_count >= 1 && radius > 0.0);
    let bounds = model.param_box();
    let mut rng = stream_rng(seed, 0);
    let d = model.dim();
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    let mut max_ratio = f64::NEG_INFINITY;
    let mut pairs_used = 0;
    for _ in 0..sample_count {
        let x = uniform_in_ball(&mut rng, d, radius);
        let y = uniform_in_ball(&mut rng, d, radius);
        let dist_sq: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist_sq.sqrt() < 1e-12 {
            continue;
        }
        pairs_used += 1;
        for g in 0..bounds.grid_len(CHECK_GRID) {
            let theta = bounds.grid_point(CHECK_GRID, g);
            model.drift(&x, &theta, &mut bx);
            model.drift(&y, &theta, &mut by);
            let inner: f64 = (0..d).map(|i| (bx[i] - by[i]) * (x[i] - y[i])).sum();
            max_ratio = max_ratio.max(inner / dist_sq);
        }
    }
    DissipativityReport {
        max_ratio,
        pairs_used,
        pass: pairs_used > 0 && max_ratio <= -c1_floor,
    }
}

/// Compares `b` with central finite differences of `U` at random `(x, θ)`.
pub fn check_gradient_type(model: &dyn DriftModel, sample_count: usize, tol: f64, seed: u64) -> FiniteDifferenceReport {
    assert!(sample_count >= 1 && tol > 0.0);
    let mut rng = stream_rng(seed, 1);
    let d = model.dim();
    let mut worst: f64 = 0.0;
    for _ in 0..sample_count {
        let x = uniform_in_ball(&mut rng, d, 2.0);
        let theta = uniform_in_box(&mut rng, model.param_box());
        let b = model.drift_vec(&x, &theta);
        for i in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += FD_STEP;
            xm[i] -= FD_STEP;
            let fd = (model.potential(&xp, &theta) - model.potential(&xm, &theta)) / (2.0 * FD_STEP);
            worst = worst.max((fd - b[i]).abs());
        }
    }
    FiniteDifferenceReport {
        max_abs_err: worst,
        pass: worst <= tol,
    }
}

/// Compares the analytic Jacobians `∂_x b` and `∂_θ b` with central differences of `b`.
pub fn check_jacobians(model: &dyn DriftModel, sample_count: usize, tol: f64, seed: u64) -> JacobianReport {
    assert!(sample_count >= 1 && tol > 0.0);
    let mut rng = stream_rng(seed, 2);
    let d = model.dim();
    let q = model.param_dim();
    let (mut err_x, mut err_t): (f64, f64) = (0.0, 0.0);
    for _ in 0..sample_count {
        let x = uniform_in_ball(&mut rng, d, 2.0);
        let theta = uniform_in_box(&mut rng, model.param_box());
        let jx = model.jacobian_x(&x, &theta);
        let jt = model.jacobian_theta(&x, &theta);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += FD_STEP;
            xm[j] -= FD_STEP;
            let bp = model.drift_vec(&xp, &theta);
            let bm = model.drift_vec(&xm, &theta);
            for i in 0..d {
                err_x = err_x.max(((bp[i] - bm[i]) / (2.0 * FD_STEP) - jx[[i, j]]).abs());
            }
        }
        for j in 0..q {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += FD_STEP;
            tm[j] -= FD_STEP;
            let bp = model.drift_vec(&x, &tp);
            let bm = model.drift_vec(&x, &tm);
            for i in 0..d {
                err_t = err_t.max(((bp[i] - bm[i]) / (2.0 * FD_STEP) - jt[[i, j]]).abs());
            }
        }
    }
    JacobianReport {
        max_abs_err_x: err_x,
        max_abs_err_theta: err_t,
        pass: err_x <= tol && err_t <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Deliberately inconsistent pair: `U ≡ 0` but `b(x) = x`.
    struct Mismatched(ParameterBox);

    impl DriftModel for Mismatched {
        fn name(&self) -> &str {
            "mismatched"
        }
        fn dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn param_box(&self) -> &ParameterBox {
            &self.0
        }
        fn drift(&self, x: &[f64], _theta: &[f64], out: &mut [f64]) {
            out[0] = x[0];
        }
        fn jacobian_x(&self, _x: &[f64], _theta: &[f64]) -> Array2<f64> {
            Array2::ones((1, 1))
        }
        fn jacobian_theta(&self, _x: &[f64], _theta: &[f64]) -> Array2<f64> {
            Array2::zeros((1, 1))
        }
        fn potential(&self, _x: &[f64], _theta: &[f64]) -> f64 {
            0.0
        }
    }

    #[test]
    fn box_validation_and_projection() {
        assert!(ParameterBox::interval(1.0, 1.0).is_err());
        assert!(ParameterBox::interval(2.0, 1.0).is_err());
        assert!(ParameterBox::new(vec![], vec![]).is_err());
        assert!(ParameterBox::new(vec![0.0], vec![1.0, 2.0]).is_err());
        let b = ParameterBox::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert!(b.contains(&[0.0, 1.0]));
        assert!(!b.contains(&[0.0, 3.0]));
        let mut t = [-5.0, 5.0];
        b.project(&mut t);
        assert_eq!(t, [-1.0, 2.0]);
    }

    #[test]
    fn grid_is_lexicographic_with_endpoints() {
        let b = ParameterBox::new(vec![0.0, 10.0], vec![1.0, 20.0]).unwrap();
        assert_eq!(b.grid_len(3), 9);
        assert_eq!(b.grid_point(3, 0), vec![0.0, 10.0]);
        assert_eq!(b.grid_point(3, 1), vec![0.0, 15.0]);
        assert_eq!(b.grid_point(3, 3), vec![0.5, 10.0]);
        assert_eq!(b.grid_point(3, 8), vec![1.0, 20.0]);
    }

    #[test]
    fn builtin_evaluations() {
        let fou = model_by_name("fou", None, None).unwrap();
        assert_eq!(fou.drift_vec(&[2.0], &[-1.0]), vec![-2.0]);
        assert_eq!(fou.param_box().lower(), &[-3.0]);
        assert_eq!(fou.param_box().upper(), &[-0.1]);

        let quartic = model_by_name("langevin-quartic", None, None).unwrap();
        assert_eq!(quartic.drift_vec(&[1.0], &[1.0]), vec![-2.0]);
        assert_eq!(quartic.param_box().lower(), &[0.1]);

        let multi = model_by_name("fou-multi", Some(2), None).unwrap();
        assert_eq!(multi.drift_vec(&[1.0, 2.0], &[-1.0]), vec![-1.0, -2.0]);

        assert!(matches!(
            model_by_name("nope", None, None),
            Err(ModelError::UnknownModelName(_))
        ));
        assert!(model_by_name("fou", Some(2), None).is_err());
    }

    #[test]
    fn dissipativity_of_linear_drift_is_upper_bound_of_box() {
        let m = LinearDrift::new("fou", 1, ParameterBox::interval(-2.0, -0.5).unwrap()).unwrap();
        let r = check_dissipativity(&m, 200, 3.0, 0.5, 1);
        assert_relative_eq!(r.max_ratio, -0.5, epsilon = 1e-12);
        assert!(r.pass);
        assert!(!check_dissipativity(&m, 200, 3.0, 0.6, 1).pass);

        let expanding = LinearDrift::new("fou", 1, ParameterBox::interval(0.5, 1.0).unwrap()).unwrap();
        let r = check_dissipativity(&expanding, 200, 3.0, 0.0, 1);
        assert_relative_eq!(r.max_ratio, 1.0, epsilon = 1e-12);
        assert!(!r.pass);
    }

    #[test]
    fn dissipativity_of_quartic_langevin() {
        let m = QuarticLangevin::new(1, ParameterBox::interval(0.5, 2.0).unwrap()).unwrap();
        let r = check_dissipativity(&m, 500, 3.0, 0.5, 2);
        assert!(r.max_ratio <= -0.5, "{}", r.max_ratio);
        assert!(r.pass);
    }

    #[test]
    fn gradient_checks() {
        let fou = model_by_name("fou", None, None).unwrap();
        let r = check_gradient_type(fou.as_ref(), 100, 1e-6, 3);
        assert!(r.max_abs_err < 1e-6 && r.pass);

        let bad = Mismatched(ParameterBox::interval(0.0, 1.0).unwrap());
        assert!(!check_gradient_type(&bad, 10, 1e-6, 3).pass);

        let quartic = model_by_name("langevin-quartic", None, None).unwrap();
        assert!(check_gradient_type(quartic.as_ref(), 100, 1e-5, 3).pass);
    }

    #[test]
    fn builtins_satisfy_all_checkers() {
        for entry in builtin_models() {
            for dim in [entry.default_dim, 3] {
                let Ok(model) = entry.build(Some(dim), None) else {
                    continue;
                };
                let bounds = model.param_box().clone();
                for g in 0..10 {
                    let theta = bounds.grid_point(10, g);
                    let one = ParameterBox::interval(theta[0] - 1e-3, theta[0] + 1e-3)
                        .map(|b| entry.build(Some(dim), Some(b)).unwrap())
                        .unwrap();
                    assert!(check_gradient_type(one.as_ref(), 20, 1e-5, g as u64).pass, "{}", entry.name);
                }
                let j = check_jacobians(model.as_ref(), 50, 1e-5, 4);
                assert!(j.pass, "{} {:?}", entry.name, j);
                let c1 = model.dissipativity_constant().unwrap();
                let r = check_dissipativity(model.as_ref(), 200, 2.0, 0.5 * c1, 5);
                assert!(r.pass, "{} {:?}", entry.name, r);
            }
        }
    }

    #[test]
    fn noise_model_norm() {
        let h = HurstIndex::new(0.7).unwrap();
        let sigma = ndarray::array![[1.0, 2.0], [0.0, -1.0]];
        let n = NoiseModel::new(h, sigma.clone()).unwrap();
        assert_eq!(n.sigma_norm_sq(), sigma.iter().map(|v| v * v).sum::<f64>());
        assert_eq!(n.sigma_norm_sq(), 6.0);
        assert_eq!((n.dim(), n.components()), (2, 2));
        assert!(NoiseModel::new(h, Array2::zeros((1, 1))).is_err());
        assert_eq!(NoiseModel::isotropic(h, 2.0, 3).unwrap().sigma_norm_sq(), 12.0);
    }
}
