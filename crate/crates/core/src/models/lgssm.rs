//! Linear-Gaussian state-space model with its Kalman filter oracle.
//!
//! The latent chain starts from a standard-normal prior, scales by `theta1`
//! each step, and adds unit process noise; observations scale the state by
//! `theta2` and add noise of variance `obs_var` in every coordinate,
//! including at the initial step. Because everything is linear and Gaussian
//! the filtering distributions and the likelihood are exact, so this model
//! supplies ground truth for particle-filter output and for gradients: the
//! filter is generic over the scalar type and differentiates through both
//! parameters.

use super::ModelError;
use crate::linalg::{gaussian_logpdf, spd_eigh, spd_fn, Matrix};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::smc::{FeynmanKac, SmcError};

#[derive(Clone, Copy, Debug)]
pub struct LgssmParams<S> {
    /// Transition scale of the latent chain.
    pub theta1: S,
    /// Observation scale.
    pub theta2: S,
    pub dim: usize,
    pub process_var: f64,
    pub obs_var: f64,
}

impl<S: Scalar> LgssmParams<S> {
    /// Parameters with the standard noise scales: unit process variance and
    /// observation variance one half.
    pub fn new(theta1: S, theta2: S, dim: usize) -> Self {
        LgssmParams {
            theta1,
            theta2,
            dim,
            process_var: 1.0,
            obs_var: 0.5,
        }
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.dim == 0 {
            return Err(ModelError::InvalidParameter(
                "the state dimension must be positive".to_string(),
            ));
        }
        for (name, v) in [("process", self.process_var), ("observation", self.obs_var)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(ModelError::InvalidParameter(format!(
                    "{name} variance must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Simulates `n_steps + 1` states and observations (step 0 included).
///
/// State draws come from child stream 0 of `rng` and observation draws from
/// child stream 1, each consumed in time order, so callers can replay either
/// sequence independently.
pub fn lgssm_simulate(
    params: &LgssmParams<f64>,
    n_steps: usize,
    rng: &RngStream,
) -> Result<(Matrix<f64>, Matrix<f64>), ModelError> {
    params.check()?;
    let d = params.dim;
    let mut state_stream = rng.split(0);
    let mut obs_stream = rng.split(1);
    let mut states = Matrix::zeros(n_steps + 1, d);
    let mut obs = Matrix::zeros(n_steps + 1, d);
    let process_sd = params.process_var.sqrt();
    let obs_sd = params.obs_var.sqrt();
    for j in 0..=n_steps {
        for k in 0..d {
            states[(j, k)] = if j == 0 {
                state_stream.draw_normal()
            } else {
                params.theta1 * states[(j - 1, k)] + process_sd * state_stream.draw_normal()
            };
            obs[(j, k)] = params.theta2 * states[(j, k)] + obs_sd * obs_stream.draw_normal();
        }
    }
    Ok((states, obs))
}

#[derive(Clone, Debug)]
pub struct KalmanOutput<S> {
    /// Posterior state means after each observation.
    pub means: Vec<Vec<S>>,
    /// Posterior state covariances after each observation.
    pub covs: Vec<Matrix<S>>,
    /// Exact log-likelihood of the observation sequence.
    pub log_lik: S,
    /// Innovation (one-step observation residual) at each step.
    pub innovations: Vec<Vec<S>>,
    /// Predictive covariance of each innovation.
    pub innovation_vars: Vec<Matrix<S>>,
}

/// Exact filtering recursion; rows of `obs` are the observations in time
/// order starting at step 0. The covariance update uses the Joseph form so
/// the posterior matrices stay symmetric positive definite.
pub fn kalman_filter<S: Scalar>(
    params: &LgssmParams<S>,
    obs: &Matrix<S>,
) -> Result<KalmanOutput<S>, ModelError> {
    params.check()?;
    let d = params.dim;
    if obs.rows() == 0 || obs.cols() != d {
        return Err(ModelError::InvalidParameter(format!(
            "observations are {}x{} but the state dimension is {d}",
            obs.rows(),
            obs.cols()
        )));
    }
    let horizon = obs.rows();
    let identity: Matrix<S> = Matrix::identity(d);
    let process_cov = identity.scale(S::lift(params.process_var));
    let obs_cov = identity.scale(S::lift(params.obs_var));
    let half = S::lift(0.5);

    // The prior acts as the step-0 prediction.
    let mut mean_pred = vec![S::ZERO; d];
    let mut cov_pred: Matrix<S> = Matrix::identity(d);
    let mut out = KalmanOutput {
        means: Vec::with_capacity(horizon),
        covs: Vec::with_capacity(horizon),
        log_lik: S::ZERO,
        innovations: Vec::with_capacity(horizon),
        innovation_vars: Vec::with_capacity(horizon),
    };
    let zero = vec![S::ZERO; d];
    for j in 0..horizon {
        let innovation: Vec<S> = (0..d)
            .map(|k| obs[(j, k)] - params.theta2 * mean_pred[k])
            .collect();
        let innovation_var = cov_pred
            .scale(params.theta2 * params.theta2)
            .add(&obs_cov);
        // The observation noise keeps this matrix safely positive definite,
        // so factor it without the regularising jitter and stay exact.
        let factor = spd_eigh(&innovation_var, Some(0.0))?;
        out.log_lik += gaussian_logpdf(&innovation, &zero, &factor)?;

        let gain = cov_pred
            .scale(params.theta2)
            .matmul(&spd_fn(&factor, |v| S::ONE / v));
        let mut mean: Vec<S> = mean_pred.clone();
        for k in 0..d {
            for l in 0..d {
                mean[k] = gain[(k, l)].mul_add(innovation[l], mean[k]);
            }
        }
        let shrink = identity.sub(&gain.scale(params.theta2));
        let cov = shrink
            .matmul(&cov_pred)
            .matmul(&shrink.transpose())
            .add(&gain.matmul(&gain.transpose()).scale(S::lift(params.obs_var)));
        let cov = cov.add(&cov.transpose()).scale(half);

        mean_pred = mean.iter().map(|m| params.theta1 * *m).collect();
        cov_pred = cov.scale(params.theta1 * params.theta1).add(&process_cov);

        out.means.push(mean);
        out.covs.push(cov);
        out.innovations.push(innovation);
        out.innovation_vars.push(innovation_var);
    }
    Ok(out)
}

/// Bootstrap particle-filter view of the model: the transition kernel is the
/// state equation and the potential is the observation likelihood, so the
/// normalising constant matches the Kalman log-likelihood.
pub struct LgssmModel<S> {
    params: LgssmParams<S>,
    obs: Matrix<S>,
}

impl<S: Scalar> LgssmModel<S> {
    pub fn new(params: LgssmParams<S>, obs: &Matrix<f64>) -> Result<Self, ModelError> {
        params.check()?;
        if obs.rows() == 0 || obs.cols() != params.dim {
            return Err(ModelError::InvalidParameter(format!(
                "observations are {}x{} but the state dimension is {}",
                obs.rows(),
                obs.cols(),
                params.dim
            )));
        }
        Ok(LgssmModel {
            params,
            obs: Matrix::lift(obs),
        })
    }
}

impl<S: Scalar> FeynmanKac<S> for LgssmModel<S> {
    fn dim(&self) -> usize {
        self.params.dim
    }

    fn horizon(&self) -> usize {
        self.obs.rows()
    }

    fn init_sample(&self, rng: &mut RngStream) -> Result<Vec<S>, SmcError> {
        Ok((0..self.params.dim)
            .map(|_| S::lift(rng.draw_normal()))
            .collect())
    }

    fn transition(
        &self,
        _step: usize,
        state: &[S],
        rng: &mut RngStream,
    ) -> Result<Vec<S>, SmcError> {
        let sd = self.params.process_var.sqrt();
        Ok(state
            .iter()
            .map(|x| self.params.theta1 * *x + S::lift(sd * rng.draw_normal()))
            .collect())
    }

    fn log_potential(&self, step: usize, state: &[S]) -> Result<S, SmcError> {
        let r = self.params.obs_var;
        let log_norm = S::lift(-0.5 * (std::f64::consts::TAU * r).ln() * state.len() as f64);
        let inv_2r = S::lift(-0.5 / r);
        let mut quad = S::ZERO;
        for (k, x) in state.iter().enumerate() {
            let resid = self.obs[(step, k)] - self.params.theta2 * *x;
            quad = resid.mul_add(resid, quad);
        }
        Ok(inv_2r.mul_add(quad, log_norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample::diffusion::DiffusionConfig;
    use crate::resample::Resampler;
    use crate::scalar::Dual;
    use crate::smc::{run_smc, SmcConfig};

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
    }

    fn gaussian_ll(y: f64, mean: f64, var: f64) -> f64 {
        let r = y - mean;
        -0.5 * ((std::f64::consts::TAU * var).ln() + r * r / var)
    }

    #[test]
    fn hand_worked_two_step_scalar_chain() {
        let params = LgssmParams::new(0.5, 1.0, 1);
        let (y0, y1) = (0.6, 1.0);
        let out = kalman_filter(&params, &Matrix::from_rows(&[vec![y0], vec![y1]])).unwrap();

        // Step 0 from the N(0, 1) prior.
        let s0 = 1.0 + 0.5;
        let k0 = 1.0 / s0;
        let m0 = k0 * y0;
        let p0 = (1.0 - k0) * (1.0 - k0) + 0.5 * k0 * k0;
        assert_close(out.means[0][0], m0, 1e-14, "first mean");
        assert_close(out.covs[0][(0, 0)], p0, 1e-14, "first variance");

        // Predict, then absorb the second observation.
        let m1_pred = 0.5 * m0;
        let p1_pred = 0.25 * p0 + 1.0;
        let s1 = p1_pred + 0.5;
        let k1 = p1_pred / s1;
        let m1 = m1_pred + k1 * (y1 - m1_pred);
        let p1 = (1.0 - k1) * (1.0 - k1) * p1_pred + 0.5 * k1 * k1;
        assert_close(out.means[1][0], m1, 1e-14, "second mean");
        assert_close(out.covs[1][(0, 0)], p1, 1e-14, "second variance");

        let ll = gaussian_ll(y0, 0.0, s0) + gaussian_ll(y1, m1_pred, s1);
        assert_close(out.log_lik, ll, 1e-13, "log-likelihood");
    }

    #[test]
    fn zero_observation_scale_never_updates() {
        let params = LgssmParams::new(0.7, 0.0, 2);
        let rng = RngStream::from_seed(3);
        let (_, obs) = lgssm_simulate(&LgssmParams::new(0.7, 1.0, 2), 20, &rng).unwrap();
        let out = kalman_filter(&params, &obs).unwrap();
        let mut expected = 0.0;
        for j in 0..obs.rows() {
            for k in 0..2 {
                assert_close(out.means[j][k], 0.0, 1e-14, "mean stays at the prior");
                expected += gaussian_ll(obs[(j, k)], 0.0, 0.5);
            }
        }
        assert_close(out.log_lik, expected, 1e-10, "likelihood of pure noise");
    }

    #[test]
    fn zero_transition_scale_reproduces_the_noise_stream() {
        let params = LgssmParams::new(0.0, 1.0, 3);
        let rng = RngStream::from_seed(9);
        let (states, _) = lgssm_simulate(&params, 5, &rng).unwrap();
        let mut replay = rng.split(0);
        for j in 0..=5 {
            for k in 0..3 {
                assert_eq!(states[(j, k)], replay.draw_normal(), "state draw {j},{k}");
            }
        }
    }

    #[test]
    fn vanishing_noise_gives_a_deterministic_geometric_path() {
        let mut params = LgssmParams::new(0.8, 1.5, 2);
        params.process_var = 1e-12;
        params.obs_var = 1e-12;
        let rng = RngStream::from_seed(4);
        let (states, obs) = lgssm_simulate(&params, 10, &rng).unwrap();
        for j in 0..=10 {
            for k in 0..2 {
                let expected = 1.5 * 0.8f64.powi(j as i32) * states[(0, k)];
                assert_close(obs[(j, k)], expected, 1e-4, "geometric decay");
            }
        }
    }

    #[test]
    fn long_run_variance_matches_the_stationary_law() {
        let params = LgssmParams::new(0.5, 1.0, 1);
        let rng = RngStream::from_seed(12);
        let n = 60_000;
        let (states, _) = lgssm_simulate(&params, n, &rng).unwrap();
        let burn = 100;
        let count = (n + 1 - burn) as f64;
        let mut mean = 0.0;
        for j in burn..=n {
            mean += states[(j, 0)];
        }
        mean /= count;
        let mut var = 0.0;
        for j in burn..=n {
            let d = states[(j, 0)] - mean;
            var += d * d;
        }
        var /= count;
        let stationary = 1.0 / (1.0 - 0.25);
        assert!(
            (var - stationary).abs() <= 0.02 * stationary,
            "long-run variance {var} vs {stationary}"
        );
    }

    #[test]
    fn posterior_covariances_stay_positive_definite() {
        for (t1, t2) in [(0.5, 1.0), (0.9, 2.0), (0.1, 0.3)] {
            let truth = LgssmParams::new(0.5, 1.0, 2);
            let rng = RngStream::from_seed(77);
            let (_, obs) = lgssm_simulate(&truth, 128, &rng).unwrap();
            let out = kalman_filter(&LgssmParams::new(t1, t2, 2), &obs).unwrap();
            for cov in &out.covs {
                let factor = spd_eigh(cov, None).expect("posterior covariance factorises");
                assert!(factor.eigenvalues().iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn standardised_innovations_are_white_at_the_true_parameters() {
        let params = LgssmParams::new(0.5, 1.0, 2);
        let n = 512;
        let band = 4.0 / (n as f64).sqrt();
        for seed in [21, 22, 23] {
            let rng = RngStream::from_seed(seed);
            let (_, obs) = lgssm_simulate(&params, n - 1, &rng).unwrap();
            let out = kalman_filter(&params, &obs).unwrap();
            for k in 0..2 {
                let e: Vec<f64> = (0..n)
                    .map(|j| out.innovations[j][k] / out.innovation_vars[j][(k, k)].sqrt())
                    .collect();
                let denom: f64 = e.iter().map(|v| v * v).sum();
                let lag1: f64 = e.windows(2).map(|w| w[0] * w[1]).sum();
                let rho = lag1 / denom;
                assert!(
                    rho.abs() <= band,
                    "lag-1 autocorrelation {rho} outside ±{band} (seed {seed})"
                );
            }
        }
    }

    #[test]
    fn particle_likelihood_approaches_the_exact_one() {
        let params = LgssmParams::new(0.5, 1.0, 2);
        let data_rng = RngStream::from_seed(100);
        let (_, obs) = lgssm_simulate(&params, 128, &data_rng).unwrap();
        let exact = kalman_filter(&params, &obs).unwrap().log_lik;
        let model = LgssmModel::new(params, &obs).unwrap();
        let cfg = SmcConfig {
            n_particles: 4096,
            ess_threshold: 0.5,
            resampler: Resampler::Multinomial,
        };
        for seed in [1, 2, 3] {
            let out = run_smc(&model, &cfg, &RngStream::from_seed(seed)).unwrap();
            let rel = (out.log_lik - exact).abs() / exact.abs();
            assert!(rel < 0.02, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn dual_filter_gradient_matches_finite_differences() {
        let truth = LgssmParams::new(0.5, 1.0, 2);
        let rng = RngStream::from_seed(31);
        let (_, obs) = lgssm_simulate(&truth, 64, &rng).unwrap();
        let (t1, t2) = (0.62, 0.91);
        let dual_params = LgssmParams::new(Dual::<2>::seed(t1, 0), Dual::<2>::seed(t2, 1), 2);
        let grad = kalman_filter(&dual_params, &Matrix::lift(&obs))
            .unwrap()
            .log_lik
            .tangent;
        let h = 1e-6;
        let ll = |a: f64, b: f64| {
            kalman_filter(&LgssmParams::new(a, b, 2), &obs)
                .unwrap()
                .log_lik
        };
        let fd = [
            (ll(t1 + h, t2) - ll(t1 - h, t2)) / (2.0 * h),
            (ll(t1, t2 + h) - ll(t1, t2 - h)) / (2.0 * h),
        ];
        for a in 0..2 {
            let rel = (grad[a] - fd[a]).abs() / fd[a].abs().max(1e-12);
            assert!(rel < 1e-5, "axis {a}: dual {} vs fd {}", grad[a], fd[a]);
        }
    }

    #[test]
    fn particle_gradient_tracks_the_exact_gradient() {
        // The headline differentiable-filter check: with stochastic-bridge
        // resampling the pathwise particle gradient estimates the exact score
        // of the likelihood, here compared at a point away from the truth so
        // the gradient is of systematic size. A reasonably fine bridge grid
        // keeps the transition-path component of the gradient unbiased.
        let truth = LgssmParams::new(0.5, 1.0, 2);
        let rng = RngStream::from_seed(500);
        let (_, obs) = lgssm_simulate(&truth, 64, &rng).unwrap();
        let (t1, t2) = (0.6, 1.1);
        let dual_params = LgssmParams::new(Dual::<2>::seed(t1, 0), Dual::<2>::seed(t2, 1), 2);
        let exact = kalman_filter(&dual_params, &Matrix::lift(&obs))
            .unwrap()
            .log_lik
            .tangent;

        let model = LgssmModel::new(dual_params, &obs).unwrap();
        let cfg = SmcConfig {
            n_particles: 1024,
            ess_threshold: 0.5,
            resampler: Resampler::Diffusion(DiffusionConfig {
                t_final: 3.0,
                steps: 32,
                ..DiffusionConfig::default()
            }),
        };
        let out = run_smc(&model, &cfg, &RngStream::from_seed(7)).unwrap();
        let estimate = out.log_lik.tangent;
        let err = ((estimate[0] - exact[0]).powi(2) + (estimate[1] - exact[1]).powi(2)).sqrt();
        let scale = (exact[0] * exact[0] + exact[1] * exact[1]).sqrt();
        assert!(
            err <= 0.1 * scale,
            "gradient {estimate:?} vs exact {exact:?} (relative error {})",
            err / scale
        );
    }

    #[test]
    fn bootstrap_adapter_is_deterministic() {
        let params = LgssmParams::new(0.5, 1.0, 2);
        let rng = RngStream::from_seed(61);
        let (_, obs) = lgssm_simulate(&params, 32, &rng).unwrap();
        let model = LgssmModel::new(params, &obs).unwrap();
        let cfg = SmcConfig {
            n_particles: 256,
            ess_threshold: 0.5,
            resampler: Resampler::Multinomial,
        };
        let a = run_smc(&model, &cfg, &RngStream::from_seed(8)).unwrap();
        let b = run_smc(&model, &cfg, &RngStream::from_seed(8)).unwrap();
        assert_eq!(a.log_lik, b.log_lik);
        assert_eq!(a.ess_trace, b.ess_trace);
    }

    #[test]
    fn invalid_shapes_and_scales_are_rejected() {
        let mut params = LgssmParams::new(0.5, 1.0, 2);
        assert!(kalman_filter(&params, &Matrix::<f64>::zeros(3, 1)).is_err());
        params.obs_var = 0.0;
        assert!(kalman_filter(&params, &Matrix::<f64>::zeros(3, 2)).is_err());
        assert!(LgssmModel::new(params, &Matrix::zeros(3, 2)).is_err());
    }
}
