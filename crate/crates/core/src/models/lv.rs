//! Stochastic Lotka–Volterra dynamics observed through Poisson counts.
//!
//! Prey and predator populations follow the classical interaction drift with
//! multiplicative noise on each component, discretised by the Milstein
//! scheme. Counts are observed at every grid point with rates given by
//! saturating functions of the populations, which makes the filtering
//! problem nonlinear and non-Gaussian with no closed-form solution.

use super::ModelError;
use crate::linalg::Matrix;
use crate::rng::{ln_factorial, RngStream};
use crate::smc::{FeynmanKac, SmcError};

/// Populations below this value are clamped to keep the dynamics positive.
const STATE_FLOOR: f64 = 1e-8;
/// Populations above this value abort the simulation as diverged.
const BLOWUP_GUARD: f64 = 1e8;

#[derive(Clone, Copy, Debug)]
pub struct LvParams {
    /// Prey growth rate.
    pub alpha: f64,
    /// Predation rate felt by the prey.
    pub beta: f64,
    /// Predator growth per unit of prey.
    pub zeta: f64,
    /// Predator death rate.
    pub gamma: f64,
    /// Multiplicative noise scale shared by both components.
    pub sigma: f64,
    pub dt: f64,
    pub steps: usize,
    /// Initial (prey, predator) populations.
    pub init: [f64; 2],
}

impl Default for LvParams {
    fn default() -> Self {
        LvParams {
            alpha: 6.0,
            beta: 2.0,
            zeta: 4.0,
            gamma: 6.0,
            sigma: 0.15,
            dt: 3.0 / 256.0,
            steps: 256,
            init: [1.0, 1.0],
        }
    }
}

impl LvParams {
    fn check(&self) -> Result<(), ModelError> {
        let rates = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("zeta", self.zeta),
            ("gamma", self.gamma),
            ("sigma", self.sigma),
        ];
        for (name, v) in rates {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::InvalidParameter(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !self.dt.is_finite() || self.dt <= 0.0 || self.steps == 0 {
            return Err(ModelError::InvalidParameter(
                "the time grid needs a positive spacing and step count".to_string(),
            ));
        }
        if self.init.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(ModelError::InvalidParameter(
                "initial populations must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Poisson observation rates as a saturating function of the populations.
pub fn observation_rates(prey: f64, predator: f64) -> [f64; 2] {
    [
        5.0 / (1.0 + (-5.0 * prey + 4.0).exp()),
        5.0 / (1.0 + (-prey * predator + 4.0).exp()),
    ]
}

/// Log-probability of a Poisson count at the given rate.
pub fn poisson_logpmf(count: u64, rate: f64) -> f64 {
    count as f64 * rate.ln() - rate - ln_factorial(count)
}

/// One Milstein step of both populations given the Brownian increments for
/// the step, with the positivity floor applied.
pub fn milstein_step(state: [f64; 2], params: &LvParams, dw: [f64; 2]) -> [f64; 2] {
    let [prey, predator] = state;
    let dt = params.dt;
    let half_sq = 0.5 * params.sigma * params.sigma;
    let drift = [
        prey * (params.alpha - params.beta * predator),
        predator * (params.zeta * prey - params.gamma),
    ];
    let mut next = [0.0; 2];
    for (i, n) in next.iter_mut().enumerate() {
        *n = (state[i]
            + drift[i] * dt
            + params.sigma * state[i] * dw[i]
            + half_sq * state[i] * (dw[i] * dw[i] - dt))
            .max(STATE_FLOOR);
    }
    next
}

#[derive(Clone, Debug)]
pub struct LvPath {
    /// Simulated populations, one row per grid point including the start.
    pub states: Matrix<f64>,
    /// Poisson counts observed at every grid point.
    pub observations: Vec<[u64; 2]>,
}

/// Simulates the discretised dynamics and draws counts at every grid point.
///
/// Brownian increments come from child stream 0 of `rng` and observation
/// draws from child stream 1, each consumed in time order.
pub fn lv_simulate(params: &LvParams, rng: &RngStream) -> Result<LvPath, ModelError> {
    params.check()?;
    let mut noise = rng.split(0);
    let mut counts = rng.split(1);
    let sqrt_dt = params.dt.sqrt();
    let mut states = Matrix::zeros(params.steps + 1, 2);
    states[(0, 0)] = params.init[0];
    states[(0, 1)] = params.init[1];
    for k in 1..=params.steps {
        let prev = [states[(k - 1, 0)], states[(k - 1, 1)]];
        let dw = [sqrt_dt * noise.draw_normal(), sqrt_dt * noise.draw_normal()];
        let next = milstein_step(prev, params, dw);
        if next.iter().any(|v| !v.is_finite() || *v > BLOWUP_GUARD) {
            return Err(ModelError::Blowup { step: k });
        }
        states[(k, 0)] = next[0];
        states[(k, 1)] = next[1];
    }
    let mut observations = Vec::with_capacity(params.steps + 1);
    for k in 0..=params.steps {
        let rates = observation_rates(states[(k, 0)], states[(k, 1)]);
        observations.push([counts.draw_poisson(rates[0])?, counts.draw_poisson(rates[1])?]);
    }
    Ok(LvPath {
        states,
        observations,
    })
}

/// Bootstrap particle-filter view: one Milstein step per observation step,
/// with the Poisson count likelihood as the potential.
pub struct LvModel {
    params: LvParams,
    observations: Vec<[u64; 2]>,
}

impl LvModel {
    pub fn new(params: LvParams, observations: Vec<[u64; 2]>) -> Result<Self, ModelError> {
        params.check()?;
        if observations.is_empty() {
            return Err(ModelError::InvalidParameter(
                "at least one observation is required".to_string(),
            ));
        }
        Ok(LvModel {
            params,
            observations,
        })
    }
}

impl FeynmanKac<f64> for LvModel {
    fn dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.observations.len()
    }

    fn init_sample(&self, _rng: &mut RngStream) -> Result<Vec<f64>, SmcError> {
        Ok(self.params.init.to_vec())
    }

    fn transition(
        &self,
        step: usize,
        state: &[f64],
        rng: &mut RngStream,
    ) -> Result<Vec<f64>, SmcError> {
        let sqrt_dt = self.params.dt.sqrt();
        let dw = [sqrt_dt * rng.draw_normal(), sqrt_dt * rng.draw_normal()];
        let next = milstein_step([state[0], state[1]], &self.params, dw);
        if next.iter().any(|v| !v.is_finite() || *v > BLOWUP_GUARD) {
            return Err(SmcError::Model {
                step,
                message: format!("population left the stable range: {next:?}"),
            });
        }
        Ok(next.to_vec())
    }

    fn log_potential(&self, step: usize, state: &[f64]) -> Result<f64, SmcError> {
        let rates = observation_rates(state[0], state[1]);
        let y = self.observations[step];
        Ok(poisson_logpmf(y[0], rates[0]) + poisson_logpmf(y[1], rates[1]))
    }
}
