//! Differentiable particle resampling and sequential Monte Carlo.
//!
//! The crate provides, from the bottom up:
//!
//! * [`scalar`] — a scalar abstraction covering plain `f64` and forward-mode
//!   dual numbers, so every algorithm runs identically in value and in
//!   derivative mode;
//! * [`rng`] — a counter-based splittable random stream with stable,
//!   reproducible draw paths;
//! * [`linalg`] — dense small-matrix routines: symmetric eigenfactorisation,
//!   Gaussian densities and divergences, sliced Wasserstein distance;
//! * [`resample`] — the resampling schemes: multinomial, soft, smoothed
//!   index mixing, entropic transport, and reverse-diffusion transport;
//! * [`smc`] — a sequential Monte Carlo driver over pluggable models with an
//!   effective-sample-size resampling trigger.

pub mod harness;
pub mod linalg;
pub mod models;
pub mod resample;
pub mod rng;
pub mod scalar;
pub mod smc;
