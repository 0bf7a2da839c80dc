//! Fixed-step gradient descent with a divergence guard.
//!
//! The driver is deliberately plain: `theta <- theta - step_size * gradient`
//! with no line search or momentum, so that estimation results isolate the
//! quality of the gradient estimates rather than the optimiser. The full
//! iterate trace is kept for diagnostics. A non-finite objective or gradient,
//! or an iterate escaping a norm ball, halts the descent and flags the run
//! as diverged instead of poisoning later iterations.

/// Trace of a descent: iterates, objective values, and gradient norms, with
/// entry `i` describing the state before the `i`-th update. `thetas` has one
/// more entry than `values` only when the run halted before evaluating.
#[derive(Clone, Debug)]
pub struct DescentTrace {
    pub thetas: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub diverged: bool,
}

impl DescentTrace {
    pub fn final_theta(&self) -> &[f64] {
        self.thetas.last().expect("trace holds at least the start")
    }
}

/// Runs `steps` fixed-step updates from `theta0`. The objective receives the
/// current iterate and the iteration index (so stochastic objectives can
/// refresh their randomness per step) and returns the value and gradient.
/// The descent stops early, with `diverged = true`, if the value or gradient
/// is non-finite or the iterate norm exceeds `divergence_norm`.
pub fn gradient_descent(
    objective: &mut dyn FnMut(&[f64], usize) -> (f64, Vec<f64>),
    theta0: &[f64],
    steps: usize,
    step_size: f64,
    divergence_norm: f64,
) -> DescentTrace {
    let mut theta = theta0.to_vec();
    let mut trace = DescentTrace {
        thetas: vec![theta.clone()],
        values: Vec::new(),
        grad_norms: Vec::new(),
        diverged: false,
    };
    for iter in 0..steps {
        let norm: f64 = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > divergence_norm {
            trace.diverged = true;
            return trace;
        }
        let (value, grad) = objective(&theta, iter);
        let grad_norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.values.push(value);
        trace.grad_norms.push(grad_norm);
        if !value.is_finite() || !grad_norm.is_finite() {
            trace.diverged = true;
            return trace;
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= step_size * g;
        }
        trace.thetas.push(theta.clone());
    }
    let norm: f64 = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
    if !norm.is_finite() || norm > divergence_norm {
        trace.diverged = true;
    }
    trace
}
