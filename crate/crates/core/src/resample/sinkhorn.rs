//! Entropy-regularised optimal transport resampling.
//!
//! A transport plan with uniform row marginals and weight column marginals is
//! fitted by log-domain dual ascent on the entropic objective; each output
//! particle is the row-normalised barycentre of its plan row. The whole
//! solver runs in the generic scalar type, so derivative information flows
//! through the plan.

use super::{ResampleError, ResampleOutcome, ResampleReport, WeightedEnsemble};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// How the regularisation strength is interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpsilonScaling {
    /// Use `epsilon` as given.
    Absolute,
    /// Multiply `epsilon` by the mean of the cost matrix, making the
    /// regularisation invariant to a rescaling of the particle cloud.
    MeanCost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtConfig {
    pub epsilon: f64,
    pub scaling: EpsilonScaling,
    pub max_iters: u32,
    pub tol: f64,
    /// Fail with an error when the marginal tolerance is not reached; when
    /// false the outcome reports `converged = false` instead.
    pub strict: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            epsilon: 0.8,
            scaling: EpsilonScaling::Absolute,
            max_iters: 500,
            tol: 1e-6,
            strict: false,
        }
    }
}

pub struct SinkhornResult<S> {
    /// Dense transport plan; rows sum to the row marginals, columns to the
    /// column marginals, up to the reported error.
    pub plan: Matrix<S>,
    pub iterations: u32,
    pub marginal_error: f64,
    pub converged: bool,
}

struct Potentials<S> {
    f: Vec<S>,
    g: Vec<S>,
    iterations: u32,
    marginal_error: f64,
    converged: bool,
}

/// Alternating dual updates. Each iteration makes the column marginals exact
/// for the current row potential, measures the row-marginal error, and then
/// makes the rows exact. Stops once the summed row error drops to `tol`.
fn sinkhorn_potentials<S: Scalar>(
    cost: &Matrix<S>,
    log_a: &[S],
    log_b: &[S],
    epsilon: f64,
    max_iters: u32,
    tol: f64,
) -> Potentials<S> {
    let n = cost.rows();
    let m = cost.cols();
    let eps = S::lift(epsilon);
    let inv_eps = S::lift(1.0 / epsilon);
    let mut f = vec![S::ZERO; n];
    let mut g = vec![S::ZERO; m];
    let a_vals: Vec<f64> = log_a.iter().map(|x| x.value().exp()).collect();

    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;
    let mut converged = false;
    let mut col_max = vec![S::ZERO; m];
    let mut col_sum = vec![S::ZERO; m];
    while iterations < max_iters {
        iterations += 1;
        // Column pass: g_j = eps * log b_j - eps * lse_i((f_i - C_ij) / eps),
        // as two row-major sweeps (running maxima, then stabilised sums).
        for v in col_max.iter_mut() {
            *v = S::lift(f64::NEG_INFINITY);
        }
        for i in 0..n {
            let fi = f[i];
            let row = cost.row(i);
            for j in 0..m {
                let y = (fi - row[j]) * inv_eps;
                col_max[j] = col_max[j].max_val(y);
            }
        }
        for v in col_sum.iter_mut() {
            *v = S::ZERO;
        }
        for i in 0..n {
            let fi = f[i];
            let row = cost.row(i);
            for j in 0..m {
                let y = (fi - row[j]) * inv_eps;
                col_sum[j] += (y - col_max[j]).exp_fast();
            }
        }
        for j in 0..m {
            let lse = col_max[j] + col_sum[j].ln();
            g[j] = eps * (log_b[j] - lse);
        }
        // Row pass: measure the row-marginal error of the current plan, then
        // update f_i to make the rows exact.
        let mut err = 0.0f64;
        for i in 0..n {
            let row = cost.row(i);
            let mut ymax = S::lift(f64::NEG_INFINITY);
            for j in 0..m {
                let y = (g[j] - row[j]) * inv_eps;
                ymax = ymax.max_val(y);
            }
            let mut sum = S::ZERO;
            for j in 0..m {
                let y = (g[j] - row[j]) * inv_eps;
                sum += (y - ymax).exp_fast();
            }
            let lse = ymax + sum.ln();
            let row_mass = (f[i] * inv_eps + lse).value().exp();
            err += (row_mass - a_vals[i]).abs();
            f[i] = eps * (log_a[i] - lse);
        }
        marginal_error = err;
        if err <= tol {
            converged = true;
            break;
        }
    }
    Potentials {
        f,
        g,
        iterations,
        marginal_error,
        converged,
    }
}

/// Fit the entropic transport plan between arbitrary marginals under the
/// given cost. `log_a` and `log_b` are log-marginals summing to one in
/// probability space; `epsilon` is used as given.
pub fn sinkhorn_plan<S: Scalar>(
    cost: &Matrix<S>,
    log_a: &[S],
    log_b: &[S],
    epsilon: f64,
    max_iters: u32,
    tol: f64,
) -> Result<SinkhornResult<S>, ResampleError> {
    if cost.rows() != log_a.len() || cost.cols() != log_b.len() {
        return Err(ResampleError::InvalidConfig(format!(
            "cost is {}x{} but marginals have {} and {} entries",
            cost.rows(),
            cost.cols(),
            log_a.len(),
            log_b.len()
        )));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(ResampleError::InvalidConfig(format!(
            "regularisation must be positive and finite, got {epsilon}"
        )));
    }
    let pot = sinkhorn_potentials(cost, log_a, log_b, epsilon, max_iters, tol);
    let inv_eps = S::lift(1.0 / epsilon);
    let plan = Matrix::from_fn(cost.rows(), cost.cols(), |i, j| {
        ((pot.f[i] + pot.g[j] - cost[(i, j)]) * inv_eps).exp_fast()
    });
    Ok(SinkhornResult {
        plan,
        iterations: pot.iterations,
        marginal_error: pot.marginal_error,
        converged: pot.converged,
    })
}

/// Squared-distance cost matrix between all particle pairs.
fn pairwise_cost<S: Scalar>(particles: &Matrix<S>) -> Matrix<S> {
    let n = particles.rows();
    let d = particles.cols();
    let mut cost = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let (ri, rj) = (particles.row(i), particles.row(j));
            let mut acc = S::ZERO;
            for k in 0..d {
                let diff = ri[k] - rj[k];
                acc = diff.mul_add(diff, acc);
            }
            cost[(i, j)] = acc;
            cost[(j, i)] = acc;
        }
    }
    cost
}

/// Transport the ensemble onto equally weighted particles: fit a plan with
/// uniform row marginals and weight column marginals under squared-distance
/// cost, then replace each output row by its plan row's barycentre.
pub fn ot_resample<S: Scalar>(
    ens: &WeightedEnsemble<S>,
    cfg: &OtConfig,
) -> Result<ResampleOutcome<S>, ResampleError> {
    if !(cfg.epsilon > 0.0) || !cfg.epsilon.is_finite() {
        return Err(ResampleError::InvalidConfig(format!(
            "regularisation must be positive and finite, got {}",
            cfg.epsilon
        )));
    }
    if cfg.max_iters == 0 {
        return Err(ResampleError::InvalidConfig(
            "transport solver needs at least one iteration".to_string(),
        ));
    }
    let n = ens.len();
    let d = ens.dim();
    let cost = pairwise_cost(ens.particles());
    let epsilon = match cfg.scaling {
        EpsilonScaling::Absolute => cfg.epsilon,
        EpsilonScaling::MeanCost => {
            let mean = cost.data().iter().map(|c| c.value()).sum::<f64>() / (n * n) as f64;
            let scaled = cfg.epsilon * mean;
            if scaled > 0.0 {
                scaled
            } else {
                cfg.epsilon
            }
        }
    };
    let log_a = vec![S::lift(-(n as f64).ln()); n];
    let pot = sinkhorn_potentials(&cost, &log_a, ens.log_weights(), epsilon, cfg.max_iters, cfg.tol);
    if !pot.converged && cfg.strict {
        return Err(ResampleError::NotConverged {
            iterations: pot.iterations,
            error: pot.marginal_error,
        });
    }
    // Row-normalised barycentres: a softmax mixture over the plan row, which
    // stays an exact convex combination whatever the convergence state.
    let inv_eps = S::lift(1.0 / epsilon);
    let mut out = Matrix::zeros(n, d);
    let mut logits = vec![S::ZERO; n];
    for i in 0..n {
        let row = cost.row(i);
        let mut ymax = S::lift(f64::NEG_INFINITY);
        for j in 0..n {
            let y = (pot.g[j] - row[j]) * inv_eps;
            logits[j] = y;
            ymax = ymax.max_val(y);
        }
        let mut norm = S::ZERO;
        for l in logits.iter_mut() {
            let e = (*l - ymax).exp_fast();
            *l = e;
            norm += e;
        }
        let inv_norm = S::ONE / norm;
        let out_row = out.row_mut(i);
        for j in 0..n {
            let a = logits[j] * inv_norm;
            let src = ens.particles().row(j);
            for (ok, &sk) in out_row.iter_mut().zip(src.iter()) {
                *ok = a.mul_add(sk, *ok);
            }
        }
    }
    Ok(ResampleOutcome {
        ensemble: WeightedEnsemble::uniform(out)?,
        report: ResampleReport {
            iterations: Some(pot.iterations),
            converged: Some(pot.converged),
            marginal_error: Some(pot.marginal_error),
        },
    })
}
