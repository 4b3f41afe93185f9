//! Drift estimation for diffusions driven by additive fractional Brownian motion.
//!
//! The crate simulates SDEs `dY = b(Y; ϑ) dt + Σ_j σ_j dB^{(j)}` with `H > 1/2`,
//! evaluates the zero-squares statistic `Q_n(ϑ)` from equally spaced
//! observations and estimates `ϑ` as a root of it.

pub mod fgn;
pub mod models;
pub mod numeric;
pub mod rng;
pub mod simulate;
pub mod statistic;
pub mod optim;
pub mod estimate;
pub mod pathio;
pub mod harness;
