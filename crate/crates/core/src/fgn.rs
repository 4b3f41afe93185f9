//! Exact sampling of fractional Gaussian noise (fGN) and fractional Brownian motion.
//!
//! The fGN sequence with Hurst index `H` and grid spacing `δ` is the stationary
//! Gaussian sequence with autocovariance
//!
//! ```text
//! γ(k) = ½ (|k+1|^{2H} − 2|k|^{2H} + |k−1|^{2H}) · δ^{2H}
//! ```
//!
//! The primary sampler embeds the Toeplitz covariance into a circulant of
//! length `2·next_pow2(count)` and diagonalises it with an FFT. Sequences
//! shorter than [`CHOLESKY_BELOW`] (and any embedding that turns out not to be
//! nonnegative definite) use a dense Cholesky factor instead.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;

/// Sequences shorter than this are always sampled by Cholesky factorisation.
pub const CHOLESKY_BELOW: usize = 16;
/// Largest sequence the dense fallback will accept.
pub const CHOLESKY_MAX: usize = 4096;
/// Relative tolerance on negative circulant eigenvalues.
pub const EIGEN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FgnError {
    #[error("Hurst index must lie in (0, 1), got {0}")]
    InvalidHurst(f64),
    #[error("invalid fGN spec: {0}")]
    InvalidSpec(String),
    #[error("circulant embedding has eigenvalue {min_eigenvalue:e} below -{EIGEN_TOLERANCE:e} x max {max_eigenvalue:e}")]
    CirculantNotPsd {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },
    #[error("covariance matrix of size {0} is not positive definite")]
    CholeskyFailed(usize),
}

/// Hurst index `H ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct HurstIndex(f64);

impl HurstIndex {
    pub fn new(value: f64) -> Result<Self, FgnError> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(FgnError::InvalidHurst(value))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for HurstIndex {
    type Error = FgnError;
    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<HurstIndex> for f64 {
    fn from(h: HurstIndex) -> f64 {
        h.0
    }
}

/// What to sample: `dims` independent fGN rows of `count` increments at spacing `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgnSpec {
    pub h: HurstIndex,
    pub step: f64,
    pub count: usize,
    pub dims: usize,
    pub seed: u64,
}

impl FgnSpec {
    pub fn new(h: HurstIndex, step: f64, count: usize, dims: usize, seed: u64) -> Result<Self, FgnError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(FgnError::InvalidSpec(format!("step must be positive, got {step}")));
        }
        if count == 0 {
            return Err(FgnError::InvalidSpec("count must be at least 1".into()));
        }
        if dims == 0 {
            return Err(FgnError::InvalidSpec("dims must be at least 1".into()));
        }
        Ok(Self { h, step, count, dims, seed })
    }
}

/// `dims × count` matrix of increments, one row per independent component.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementMatrix(pub Array2<f64>);

impl IncrementMatrix {
    pub fn dims(&self) -> usize {
        self.0.nrows()
    }

    pub fn count(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Autocovariance of fGN at integer `lag` for grid spacing `step`.
pub fn fgn_autocovariance(h: HurstIndex, lag: usize, step: f64) -> f64 {
    let two_h = 2.0 * h.value();
    let k = lag as f64;
    let second_diff = (k + 1.0).powf(two_h) - 2.0 * k.powf(two_h) + (k - 1.0).abs().powf(two_h);
    0.5 * second_diff * step.powf(two_h)
}

/// Covariance `E[B_s B_t]` of one fBm component.
pub fn fbm_covariance(h: HurstIndex, s: f64, t: f64) -> f64 {
    let two_h = 2.0 * h.value();
    0.5 * (t.powf(two_h) + s.powf(two_h) - (t - s).abs().powf(two_h))
}

enum Backend {
    /// `sqrt(λ_k / M)` for the circulant of size `M`.
    Circulant {
        scaled_sqrt_eigs: Vec<f64>,
        fft: Arc<dyn Fft<f64>>,
    },
    /// Lower Cholesky factor of the unit-step covariance.
    Cholesky { lower: DMatrix<f64> },
}

/// Reusable unit-step fGN sampler for a fixed `(H, count)`.
///
/// Building the sampler is the expensive part (one FFT or one factorisation);
/// each subsequent [`FgnSampler::sample`] costs one FFT or one mat-vec.
pub struct FgnSampler {
    h: HurstIndex,
    count: usize,
    backend: Backend,
}

impl FgnSampler {
    /// Circulant embedding when `count ≥ CHOLESKY_BELOW`, falling back to
    /// Cholesky if the embedding is not nonnegative definite.
    pub fn new(h: HurstIndex, count: usize) -> Result<Self, FgnError> {
        if count < CHOLESKY_BELOW {
            return Self::cholesky(h, count);
        }
        match Self::circulant(h, count) {
            Ok(s) => Ok(s),
            Err(FgnError::CirculantNotPsd { .. }) if count <= CHOLESKY_MAX => {
                log::warn!("circulant embedding not PSD for H={}, count={count}; using Cholesky", h.value());
                Self::cholesky(h, count)
            }
            Err(e) => Err(e),
        }
    }

    pub fn circulant(h: HurstIndex, count: usize) -> Result<Self, FgnError> {
        if count == 0 {
            return Err(FgnError::InvalidSpec("count must be at least 1".into()));
        }
        let half = count.next_power_of_two();
        let size = 2 * half;
        let mut row: Vec<Complex<f64>> = Vec::with_capacity(size);
        for k in 0..=half {
            row.push(Complex::new(fgn_autocovariance(h, k, 1.0), 0.0));
        }
        for k in (1..half).rev() {
            row.push(Complex::new(fgn_autocovariance(h, k, 1.0), 0.0));
        }
        let fft = FftPlanner::<f64>::new().plan_fft_forward(size);
        fft.process(&mut row);

        let max = row.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
        let min = row.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
        if min < -EIGEN_TOLERANCE * max {
            return Err(FgnError::CirculantNotPsd {
                min_eigenvalue: min,
                max_eigenvalue: max,
            });
        }
        let scaled_sqrt_eigs = row.iter().map(|c| (c.re.max(0.0) / size as f64).sqrt()).collect();
        Ok(Self {
            h,
            count,
            backend: Backend::Circulant { scaled_sqrt_eigs, fft },
        })
    }

    pub fn cholesky(h: HurstIndex, count: usize) -> Result<Self, FgnError> {
        if count == 0 {
            return Err(FgnError::InvalidSpec("count must be at least 1".into()));
        }
        if count > CHOLESKY_MAX {
            return Err(FgnError::InvalidSpec(format!(
                "dense Cholesky limited to {CHOLESKY_MAX} increments, got {count}"
            )));
        }
        let gamma: Vec<f64> = (0..count).map(|k| fgn_autocovariance(h, k, 1.0)).collect();
        let cov = DMatrix::from_fn(count, count, |i, j| gamma[i.abs_diff(j)]);
        let lower = cov
            .cholesky()
            .ok_or(FgnError::CholeskyFailed(count))?
            .unpack();
        Ok(Self {
            h,
            count,
            backend: Backend::Cholesky { lower },
        })
    }

    pub fn hurst(&self) -> HurstIndex {
        self.h
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_circulant(&self) -> bool {
        matches!(self.backend, Backend::Circulant { .. })
    }

    /// One row of `count` increments at spacing `step`, written into `out`.
    pub fn sample_into(&self, rng: &mut ChaCha8Rng, step: f64, out: &mut [f64]) {
        assert_eq!(out.len(), self.count);
        let scale = step.powf(self.h.value());
        match &self.backend {
            Backend::Circulant { scaled_sqrt_eigs, fft } => {
                let mut buf: Vec<Complex<f64>> = scaled_sqrt_eigs
                    .iter()
                    .map(|&s| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        Complex::new(s * re, s * im)
                    })
                    .collect();
                fft.process(&mut buf);
                for (o, c) in out.iter_mut().zip(&buf) {
                    *o = c.re * scale;
                }
            }
            Backend::Cholesky { lower } => {
                let z: Vec<f64> = (0..self.count).map(|_| rng.sample(StandardNormal)).collect();
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, zj) in z.iter().enumerate().take(i + 1) {
                        acc += lower[(i, j)] * zj;
                    }
                    *o = acc * scale;
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, step: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.count];
        self.sample_into(rng, step, &mut out);
        out
    }

    /// All rows of `spec`, row `j` drawn from stream `j` of `spec.seed`.
    pub fn sample_spec(&self, spec: &FgnSpec) -> IncrementMatrix {
        assert_eq!(spec.count, self.count);
        let mut values = Array2::zeros((spec.dims, spec.count));
        for (j, mut row) in values.rows_mut().into_iter().enumerate() {
            let mut rng = stream_rng(spec.seed, j as u64);
            let slice = row.as_slice_mut().expect("standard layout");
            self.sample_into(&mut rng, spec.step, slice);
        }
        IncrementMatrix(values)
    }
}

/// Draws the increments described by `spec`.
///
/// Output is a pure function of `spec`.
pub fn sample_fgn(spec: &FgnSpec) -> Result<IncrementMatrix, FgnError> {
    Ok(FgnSampler::new(spec.h, spec.count)?.sample_spec(spec))
}

/// Circulant-only sampler; reports [`FgnError::CirculantNotPsd`] instead of falling back.
pub fn sample_fgn_circulant(spec: &FgnSpec) -> Result<IncrementMatrix, FgnError> {
    Ok(FgnSampler::circulant(spec.h, spec.count)?.sample_spec(spec))
}

pub fn sample_fgn_cholesky(spec: &FgnSpec) -> Result<IncrementMatrix, FgnError> {
    Ok(FgnSampler::cholesky(spec.h, spec.count)?.sample_spec(spec))
}

/// Row-wise prefix sums with a leading zero column: `out[j][k] = B^{(j)}_{t_k}`.
pub fn cumulate(increments: &IncrementMatrix) -> Array2<f64> {
    let (dims, count) = increments.0.dim();
    let mut out = Array2::zeros((dims, count + 1));
    for j in 0..dims {
        let mut acc = 0.0;
        for k in 0..count {
            acc += increments.0[[j, k]];
            out[[j, k + 1]] = acc;
        }
    }
    out
}

/// First differences along each row; inverse of [`cumulate`].
pub fn difference(path: ArrayView2<'_, f64>) -> IncrementMatrix {
    let (dims, len) = path.dim();
    let count = len.saturating_sub(1);
    IncrementMatrix(Array2::from_shape_fn((dims, count), |(j, k)| {
        path[[j, k + 1]] - path[[j, k]]
    }))
}
