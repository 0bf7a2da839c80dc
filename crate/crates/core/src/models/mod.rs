//! Closed-form test models with exact oracles.
//!
//! Three systems exercise the particle machinery from different angles: a
//! Gaussian mixture whose Bayes update stays in closed form, a linear-Gaussian
//! state-space model with its Kalman filter as ground truth, and a stochastic
//! Lotka–Volterra system observed through Poisson counts. The first two give
//! exact posteriors and likelihoods to compare against; the third provides a
//! nonlinear, non-Gaussian filtering problem with no closed form.

mod gm;
mod lgssm;
mod lv;

pub use gm::{mixture_fixture, scalar_obs_loglik, GaussianMixture};
pub use lgssm::{kalman_filter, lgssm_simulate, KalmanOutput, LgssmModel, LgssmParams};
pub use lv::{
    lv_simulate, milstein_step, observation_rates, poisson_logpmf, LvModel, LvParams, LvPath,
};

use crate::linalg::LinalgError;
use crate::rng::RandError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("observation update left every mixture component with zero mass")]
    DegeneratePosterior,
    #[error("simulated state exceeded the blow-up guard at step {step}")]
    Blowup { step: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Rand(#[from] RandError),
}
