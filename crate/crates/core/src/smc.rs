//! Sequential Monte Carlo with pluggable resampling.
//!
//! A model exposes its initial law, transition kernel, and per-step
//! log-potentials through [`FeynmanKac`]; [`run_smc`] runs a bootstrap-style
//! particle system over it, resampling on an effective-sample-size trigger
//! and accumulating the log normalising constant. All particle arithmetic is
//! generic over the scalar type, so the same code path produces values and
//! forward-mode derivatives.
//!
//! Stream layout: child 0 of the run stream seeds initialisation (one
//! grandchild per particle); child `j` seeds step `j`, with grandchild 0 for
//! the resampler and grandchild 1 fanned out per particle for propagation.
//! Results are therefore independent of evaluation order and thread count.

use crate::linalg::{weighted_mean_cov, Matrix};
use crate::resample::{resample, Resampler, ResampleError, ResampleReport, WeightedEnsemble};
use crate::rng::RngStream;
use crate::scalar::{log_sum_exp, Scalar};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmcError {
    #[error("all particles have zero weight at step {step}")]
    AllParticlesDead { step: usize },
    #[error("model failure at step {step}: {message}")]
    Model { step: usize, message: String },
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Resample(#[from] ResampleError),
}

/// A state-space model viewed as its sequence of kernels and potentials.
/// Steps are indexed `0..horizon()`; `transition` is called for steps
/// `1..horizon()` and the potential at every step including the first.
pub trait FeynmanKac<S: Scalar>: Sync {
    fn dim(&self) -> usize;
    /// Number of observation steps (at least one).
    fn horizon(&self) -> usize;
    fn init_sample(&self, rng: &mut RngStream) -> Result<Vec<S>, SmcError>;
    fn transition(&self, step: usize, state: &[S], rng: &mut RngStream)
        -> Result<Vec<S>, SmcError>;
    fn log_potential(&self, step: usize, state: &[S]) -> Result<S, SmcError>;
}

#[derive(Clone, Debug)]
pub struct SmcConfig {
    pub n_particles: usize,
    /// Resample when the effective sample size drops below this fraction of
    /// the particle count; a threshold of one or more resamples every step,
    /// zero never resamples.
    pub ess_threshold: f64,
    pub resampler: Resampler,
}

#[derive(Debug)]
pub struct SmcOutput<S> {
    /// Estimated log normalising constant after the final step.
    pub log_lik: S,
    /// Weighted particle mean after each step's reweighting.
    pub filter_means: Vec<Vec<S>>,
    /// Weighted particle covariance after each step's reweighting.
    pub filter_covs: Vec<Matrix<S>>,
    /// Effective sample size after each step's reweighting.
    pub ess_trace: Vec<f64>,
    /// Steps at which the trigger fired, with the resampler's report.
    pub resample_events: Vec<(usize, ResampleReport)>,
    pub final_ensemble: WeightedEnsemble<S>,
}

impl<S> SmcOutput<S> {
    pub fn resample_count(&self) -> usize {
        self.resample_events.len()
    }
}

/// Run the particle system over the full horizon.
pub fn run_smc<S: Scalar, F: FeynmanKac<S>>(
    fk: &F,
    cfg: &SmcConfig,
    rng: &RngStream,
) -> Result<SmcOutput<S>, SmcError> {
    let n = cfg.n_particles;
    if n == 0 {
        return Err(SmcError::InvalidConfig(
            "at least one particle is required".to_string(),
        ));
    }
    if !cfg.ess_threshold.is_finite() || cfg.ess_threshold < 0.0 {
        return Err(SmcError::InvalidConfig(format!(
            "the resampling threshold must be a finite fraction, got {}",
            cfg.ess_threshold
        )));
    }
    let horizon = fk.horizon();
    if horizon == 0 {
        return Err(SmcError::InvalidConfig(
            "the model must have at least one observation step".to_string(),
        ));
    }

    // Initial particles, one child stream each.
    let init_stream = rng.split(0);
    let rows: Vec<Vec<S>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut stream = init_stream.split(i as u64);
            fk.init_sample(&mut stream)
        })
        .collect::<Result<_, _>>()?;
    let mut particles = Matrix::from_rows(&rows);

    let log_n = S::lift((n as f64).ln());
    let mut log_lik = S::ZERO;
    let mut filter_means = Vec::with_capacity(horizon);
    let mut filter_covs = Vec::with_capacity(horizon);
    let mut ess_trace = Vec::with_capacity(horizon);
    let mut resample_events = Vec::new();

    // Step 0: weight by the first potential.
    let log_g: Vec<S> = (0..n)
        .map(|i| fk.log_potential(0, particles.row(i)))
        .collect::<Result<_, _>>()?;
    log_lik += log_sum_exp(&log_g) - log_n;
    let mut ens = WeightedEnsemble::new(particles, log_g)
        .map_err(|e| dead_or(e, 0))?;
    record_moments(&ens, &mut filter_means, &mut filter_covs, &mut ess_trace);

    for step in 1..horizon {
        let step_stream = rng.split(step as u64);
        // Resampling decision from the current weights.
        if cfg.ess_threshold >= 1.0 || ens.ess() < cfg.ess_threshold * n as f64 {
            let outcome = resample(&cfg.resampler, &ens, &step_stream.split(0))?;
            resample_events.push((step, outcome.report));
            ens = outcome.ensemble;
        }
        // Propagate every particle through the transition kernel.
        let prop_stream = step_stream.split(1);
        let rows: Vec<Vec<S>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut stream = prop_stream.split(i as u64);
                fk.transition(step, ens.particles().row(i), &mut stream)
            })
            .collect::<Result<_, _>>()?;
        particles = Matrix::from_rows(&rows);
        // Reweight and absorb the step's evidence.
        let log_w_prev = ens.log_weights();
        let log_g: Vec<S> = (0..n)
            .map(|i| fk.log_potential(step, particles.row(i)))
            .collect::<Result<_, _>>()?;
        let combined: Vec<S> = log_w_prev
            .iter()
            .zip(log_g.iter())
            .map(|(&w, &g)| w + g)
            .collect();
        log_lik += log_sum_exp(&combined);
        ens = WeightedEnsemble::new(particles, combined)
            .map_err(|e| dead_or(e, step))?;
        record_moments(&ens, &mut filter_means, &mut filter_covs, &mut ess_trace);
    }

    Ok(SmcOutput {
        log_lik,
        filter_means,
        filter_covs,
        ess_trace,
        resample_events,
        final_ensemble: ens,
    })
}

fn dead_or(e: ResampleError, step: usize) -> SmcError {
    match e {
        ResampleError::DegenerateWeights => SmcError::AllParticlesDead { step },
        other => SmcError::Resample(other),
    }
}

fn record_moments<S: Scalar>(
    ens: &WeightedEnsemble<S>,
    means: &mut Vec<Vec<S>>,
    covs: &mut Vec<Matrix<S>>,
    ess: &mut Vec<f64>,
) {
    let (mean, cov) = weighted_mean_cov(ens.particles(), &ens.weights())
        .expect("ensemble moments are defined for non-empty ensembles");
    means.push(mean);
    covs.push(cov);
    ess.push(ens.ess());
}
