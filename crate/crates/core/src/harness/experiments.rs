//! Experiment drivers: each one turns a configuration into metric rows and
//! optional side tables, deterministically in the seed.
//!
//! Every run derives its own seed from the root seed, and all randomness
//! within a run comes from labelled child streams of that seed, so a single
//! run can be reproduced in isolation and results do not depend on how runs
//! are scheduled across threads. Runs execute in parallel; their rows are
//! buffered per run and emitted in run order. Wall-clock times are recorded
//! only by the timing sweep, keeping every other output byte-identical
//! across repeat invocations.

use super::config::{
    ConvergenceSettings, ExperimentConfig, GmSettings, KlDirection, LgssmEstimateSettings,
    LgssmFilterSettings, LgssmSurfaceSettings, LvFilterSettings, Settings, TimingSettings,
    config_hash, resampler_spec_string,
};
use super::csv::{
    MetricRow, format_value, git_revision, side_table_path, write_metric_csv, write_table_csv,
};
use super::descent::gradient_descent;
use super::HarnessError;
use crate::linalg::{dot, gaussian_kl, norm2, sliced_w1, spd_eigh, sub_vec, Matrix};
use crate::models::{
    kalman_filter, lgssm_simulate, lv_simulate, mixture_fixture, scalar_obs_loglik, LgssmModel,
    LgssmParams, LvModel, LvParams,
};
use crate::resample::{
    resample, DiffusionConfig, EpsilonScaling, OtConfig, Resampler, WeightedEnsemble,
};
use crate::rng::RngStream;
use crate::scalar::Dual;
use crate::smc::{run_smc, SmcConfig};
use rayon::prelude::*;
use std::path::PathBuf;
use std::time::Instant;

/// A free-form CSV table emitted next to the main metrics file.
#[derive(Clone, Debug)]
pub struct SideTable {
    pub suffix: String,
    pub header: String,
    pub rows: Vec<Vec<String>>,
}

/// Everything an experiment produces, before any file is written.
#[derive(Clone, Debug)]
pub struct ExperimentArtifacts {
    pub meta: Vec<(String, String)>,
    pub rows: Vec<MetricRow>,
    pub tables: Vec<SideTable>,
}

/// Runs the experiment selected by the configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentArtifacts, HarnessError> {
    let (rows, tables) = match &cfg.settings {
        Settings::Gm(s) => (exp_gm(cfg, s)?, Vec::new()),
        Settings::LgssmFilter(s) => (exp_lgssm_filter(cfg, s)?, Vec::new()),
        Settings::LgssmSurface(s) => exp_lgssm_surface(cfg, s)?,
        Settings::LgssmEstimate(s) => exp_lgssm_estimate(cfg, s)?,
        Settings::LvFilter(s) => (exp_lv_filter(cfg, s)?, Vec::new()),
        Settings::Timing(s) => (exp_timing(cfg, s)?, Vec::new()),
        Settings::Convergence(s) => (exp_convergence(cfg, s)?, Vec::new()),
    };
    let mut meta = vec![
        ("experiment".to_string(), cfg.experiment.token().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("runs".to_string(), cfg.runs.to_string()),
        ("config_hash".to_string(), config_hash(cfg)),
        ("git_revision".to_string(), git_revision()),
    ];
    if let Settings::LgssmFilter(s) = &cfg.settings {
        meta.push((
            "kl_direction".to_string(),
            s.kl_direction.token().to_string(),
        ));
    }
    Ok(ExperimentArtifacts { meta, rows, tables })
}

/// Writes the metrics file at the configured output path plus any side
/// tables, returning every path written.
pub fn write_artifacts(
    cfg: &ExperimentConfig,
    artifacts: &ExperimentArtifacts,
) -> Result<Vec<PathBuf>, HarnessError> {
    let main = PathBuf::from(&cfg.out);
    write_metric_csv(&main, &artifacts.meta, &artifacts.rows)?;
    let mut paths = vec![main];
    for table in &artifacts.tables {
        let path = side_table_path(&PathBuf::from(&cfg.out), &table.suffix);
        write_table_csv(&path, &artifacts.meta, &table.header, &table.rows)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Seed of run `run` under a root seed; reported in every CSV row so a
/// single run can be replayed without the rest.
pub fn per_run_seed(root_seed: u64, run: usize) -> u64 {
    RngStream::from_seed(root_seed).split(run as u64).next_u64()
}

/// Least-squares line fit, returning `(slope, intercept, r_squared)`.
/// Needs at least two distinct abscissae.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn collect_runs<F>(runs: usize, per_run: F) -> Result<Vec<MetricRow>, HarnessError>
where
    F: Fn(usize) -> Result<Vec<MetricRow>, HarnessError> + Sync + Send,
{
    let blocks: Vec<Vec<MetricRow>> = (0..runs)
        .into_par_iter()
        .map(per_run)
        .collect::<Result<_, _>>()?;
    Ok(blocks.into_iter().flatten().collect())
}

/// Weighted mean of an ensemble under its (normalised) weights.
fn weighted_mean(ens: &WeightedEnsemble<f64>) -> Vec<f64> {
    let weights = ens.weight_values();
    let particles = ens.particles();
    let mut out = vec![0.0; particles.cols()];
    for (i, w) in weights.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(particles.row(i)) {
            *o += w * x;
        }
    }
    out
}

/// Collision-free stream label for sweep positions: a tag for the sweep
/// kind, a coarse index, a fine index, and a repeat slot.
fn sweep_label(tag: u64, coarse: usize, fine: usize, rep: usize) -> u64 {
    (tag << 40) | ((coarse as u64) << 20) | ((fine as u64) << 8) | rep as u64
}

/// Importance-sampling fixture: particles drawn from a Gaussian proposal
/// with mean `proposal_mean` in every coordinate and `proposal_var` times
/// the identity as covariance, weighted towards a standard Gaussian target.
/// A nonzero mean makes the weighted cloud lopsided (weight mass piles onto
/// the side facing the target), which is what the horizon-decay study needs.
fn gaussian_importance_fixture(
    dim: usize,
    n: usize,
    proposal_mean: f64,
    proposal_var: f64,
    rng: &mut RngStream,
) -> Result<WeightedEnsemble<f64>, HarnessError> {
    let scale = proposal_var.sqrt();
    let mut particles = Matrix::zeros(n, dim);
    for i in 0..n {
        for j in 0..dim {
            particles[(i, j)] = proposal_mean + scale * rng.draw_normal();
        }
    }
    let log_weights = (0..n)
        .map(|i| {
            particles
                .row(i)
                .iter()
                .map(|x| {
                    let c = x - proposal_mean;
                    -0.5 * x * x + 0.5 * c * c / proposal_var
                })
                .sum::<f64>()
        })
        .collect();
    Ok(WeightedEnsemble::new(particles, log_weights)?)
}

// ---------------------------------------------------------------------------
// Static-target posterior recovery
// ---------------------------------------------------------------------------

/// Draws a random mixture prior, observes one noisy linear measurement of a
/// latent draw, weights prior samples by the likelihood, and scores each
/// resampling scheme against fresh samples from the exact posterior: the
/// sliced transport distance of the resampled cloud (raw rows, residual
/// weights ignored) and the squared error of its weighted mean. A second
/// independent exact sample set provides the same-distribution baseline
/// under the `exact` label.
fn exp_gm(cfg: &ExperimentConfig, s: &GmSettings) -> Result<Vec<MetricRow>, HarnessError> {
    let schemes: Vec<(String, Resampler)> = s
        .resamplers
        .iter()
        .map(|r| (resampler_spec_string(r), r.clone()))
        .collect();
    collect_runs(cfg.runs, |run| {
        let seed_r = per_run_seed(cfg.seed, run);
        let root = RngStream::from_seed(seed_r);
        let (mixture, h, obs_var) = mixture_fixture(s.dim, s.components, &mut root.split(0))?;
        let mut obs_rng = root.split(1);
        let latent = mixture.sample(1, &mut obs_rng)?;
        let y = dot(&h, latent.row(0)) + obs_var.sqrt() * obs_rng.draw_normal();
        let posterior = mixture.posterior(&h, obs_var, y)?;
        let (posterior_mean, _) = posterior.moments();

        let prior = mixture.sample(s.particles, &mut root.split(2))?;
        let log_weights: Vec<f64> = (0..s.particles)
            .map(|i| scalar_obs_loglik(&h, obs_var, y, prior.row(i)))
            .collect();
        let ens = WeightedEnsemble::new(prior, log_weights)?;
        let exact = posterior.sample(s.posterior_samples, &mut root.split(3))?;
        let second = posterior.sample(s.posterior_samples, &mut root.split(4))?;

        let mut rows = vec![
            MetricRow::new(
                run,
                seed_r,
                "exact",
                "swd",
                sliced_w1(&second, &exact, s.swd_projections, seed_r)?,
            ),
            MetricRow::new(
                run,
                seed_r,
                "prior",
                "ess_fraction",
                ens.ess() / s.particles as f64,
            ),
        ];
        for (si, (spec, scheme)) in schemes.iter().enumerate() {
            let out = resample(scheme, &ens, &root.split(10 + si as u64))?;
            let swd = sliced_w1(out.ensemble.particles(), &exact, s.swd_projections, seed_r)?;
            let mut row = MetricRow::new(run, seed_r, spec, "swd", swd);
            row.iterations = out.report.iterations;
            row.marginal_error = out.report.marginal_error;
            rows.push(row);
            let err = sub_vec(&weighted_mean(&out.ensemble), &posterior_mean);
            rows.push(MetricRow::new(
                run,
                seed_r,
                spec,
                "mean_sq_error",
                dot(&err, &err),
            ));
        }
        Ok(rows)
    })
}

// ---------------------------------------------------------------------------
// Linear-Gaussian filtering accuracy
// ---------------------------------------------------------------------------

/// Simulates a linear-Gaussian chain, runs the exact filter and a particle
/// filter per scheme on the same data, and reports the mean per-step
/// divergence between moment-matched Gaussians along with log-likelihood
/// accuracy. A particle filter that dies mid-run yields `nan` rows rather
/// than aborting the sweep.
fn exp_lgssm_filter(
    cfg: &ExperimentConfig,
    s: &LgssmFilterSettings,
) -> Result<Vec<MetricRow>, HarnessError> {
    let truth = LgssmParams::new(s.theta1, s.theta2, s.dim);
    let schemes: Vec<(String, Resampler)> = s
        .resamplers
        .iter()
        .map(|r| (resampler_spec_string(r), r.clone()))
        .collect();
    collect_runs(cfg.runs, |run| {
        let seed_r = per_run_seed(cfg.seed, run);
        let root = RngStream::from_seed(seed_r);
        let (_, obs) = lgssm_simulate(&truth, s.steps, &root.split(0))?;
        let exact = kalman_filter(&truth, &obs)?;
        // Exact posterior covariances are bounded away from singularity, so
        // factor them without regularisation.
        let exact_factors = exact
            .covs
            .iter()
            .map(|c| spd_eigh(c, Some(0.0)))
            .collect::<Result<Vec<_>, _>>()?;

        let mut rows = Vec::new();
        for (si, (spec, scheme)) in schemes.iter().enumerate() {
            let smc_cfg = SmcConfig {
                n_particles: s.particles,
                ess_threshold: s.ess_threshold,
                resampler: scheme.clone(),
            };
            let model = LgssmModel::new(truth, &obs)?;
            match run_smc(&model, &smc_cfg, &root.split(10 + si as u64)) {
                Ok(out) => {
                    let mut kl_sum = 0.0;
                    for j in 0..=s.steps {
                        let emp = spd_eigh(&out.filter_covs[j], None)?;
                        kl_sum += match s.kl_direction {
                            KlDirection::EmpiricalToTrue => gaussian_kl(
                                &out.filter_means[j],
                                &emp,
                                &exact.means[j],
                                &exact_factors[j],
                            )?,
                            KlDirection::TrueToEmpirical => gaussian_kl(
                                &exact.means[j],
                                &exact_factors[j],
                                &out.filter_means[j],
                                &emp,
                            )?,
                        };
                    }
                    let n_steps = (s.steps + 1) as f64;
                    rows.push(MetricRow::new(run, seed_r, spec, "filter_kl", kl_sum / n_steps));
                    rows.push(MetricRow::new(run, seed_r, spec, "log_lik", out.log_lik));
                    rows.push(MetricRow::new(
                        run,
                        seed_r,
                        spec,
                        "log_lik_rel_error",
                        ((out.log_lik - exact.log_lik) / exact.log_lik).abs(),
                    ));
                    rows.push(MetricRow::new(
                        run,
                        seed_r,
                        spec,
                        "resample_count",
                        out.resample_count() as f64,
                    ));
                    rows.push(MetricRow::new(
                        run,
                        seed_r,
                        spec,
                        "mean_ess_fraction",
                        mean(&out.ess_trace) / s.particles as f64,
                    ));
                }
                Err(_) => {
                    for metric in ["filter_kl", "log_lik", "log_lik_rel_error"] {
                        rows.push(MetricRow::new(run, seed_r, spec, metric, f64::NAN));
                    }
                }
            }
        }
        Ok(rows)
    })
}

// ---------------------------------------------------------------------------
// Likelihood surfaces over the parameter window
// ---------------------------------------------------------------------------

fn axis(center: f64, span: f64, nodes: usize) -> Vec<f64> {
    if nodes == 1 {
        return vec![center];
    }
    let h = 2.0 * span / (nodes - 1) as f64;
    (0..nodes).map(|i| center - span + i as f64 * h).collect()
}

fn trapezoid_weight(i: usize, nodes: usize) -> f64 {
    if nodes > 1 && (i == 0 || i == nodes - 1) {
        0.5
    } else {
        1.0
    }
}

/// Evaluates the exact and particle log-likelihood surfaces over a square
/// parameter window around the truth. Particle surfaces reuse one stream
/// for every grid cell so that neighbouring cells share their randomness
/// and the surface error reflects bias and roughness, not fresh noise per
/// cell. Emits the integrated squared-deviation error per scheme and a
/// side table of all grid values, the exact surface under the `kalman`
/// label.
fn exp_lgssm_surface(
    cfg: &ExperimentConfig,
    s: &LgssmSurfaceSettings,
) -> Result<(Vec<MetricRow>, Vec<SideTable>), HarnessError> {
    let truth = LgssmParams::new(s.theta1, s.theta2, s.dim);
    let t1_axis = axis(s.theta1, s.span, s.grid);
    let t2_axis = axis(s.theta2, s.span, s.grid);
    let cell = if s.grid > 1 {
        let h = 2.0 * s.span / (s.grid - 1) as f64;
        h * h
    } else {
        1.0
    };
    let schemes: Vec<(String, Resampler)> = s
        .resamplers
        .iter()
        .map(|r| (resampler_spec_string(r), r.clone()))
        .collect();

    type RunBlock = (Vec<MetricRow>, Vec<Vec<String>>);
    let blocks: Vec<RunBlock> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| -> Result<RunBlock, HarnessError> {
            let seed_r = per_run_seed(cfg.seed, run);
            let root = RngStream::from_seed(seed_r);
            let (_, obs) = lgssm_simulate(&truth, s.steps, &root.split(0))?;

            let mut grid_rows = Vec::new();
            let mut exact_surface = Matrix::zeros(s.grid, s.grid);
            for (i, &t1) in t1_axis.iter().enumerate() {
                for (j, &t2) in t2_axis.iter().enumerate() {
                    let out = kalman_filter(&LgssmParams::new(t1, t2, s.dim), &obs)?;
                    exact_surface[(i, j)] = out.log_lik;
                    grid_rows.push(vec![
                        run.to_string(),
                        seed_r.to_string(),
                        "kalman".to_string(),
                        format_value(t1),
                        format_value(t2),
                        format_value(out.log_lik),
                    ]);
                }
            }

            let mut rows = Vec::new();
            for (si, (spec, scheme)) in schemes.iter().enumerate() {
                let smc_cfg = SmcConfig {
                    n_particles: s.particles,
                    ess_threshold: s.ess_threshold,
                    resampler: scheme.clone(),
                };
                let shared = root.split(10 + si as u64);
                let mut err_sq = 0.0;
                for (i, &t1) in t1_axis.iter().enumerate() {
                    for (j, &t2) in t2_axis.iter().enumerate() {
                        let model = LgssmModel::new(LgssmParams::new(t1, t2, s.dim), &obs)?;
                        let estimate = run_smc(&model, &smc_cfg, &shared)?.log_lik;
                        let diff = estimate - exact_surface[(i, j)];
                        err_sq += trapezoid_weight(i, s.grid)
                            * trapezoid_weight(j, s.grid)
                            * cell
                            * diff
                            * diff;
                        grid_rows.push(vec![
                            run.to_string(),
                            seed_r.to_string(),
                            spec.clone(),
                            format_value(t1),
                            format_value(t2),
                            format_value(estimate),
                        ]);
                    }
                }
                rows.push(MetricRow::new(
                    run,
                    seed_r,
                    spec,
                    "surface_error",
                    err_sq.sqrt(),
                ));
            }
            Ok((rows, grid_rows))
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut grid_rows = Vec::new();
    for (block_rows, block_grid) in blocks {
        rows.extend(block_rows);
        grid_rows.extend(block_grid);
    }
    let table = SideTable {
        suffix: "grid".to_string(),
        header: "run,seed,resampler,theta1,theta2,log_lik".to_string(),
        rows: grid_rows,
    };
    Ok((rows, vec![table]))
}

// ---------------------------------------------------------------------------
// Gradient-based parameter estimation
// ---------------------------------------------------------------------------

/// Estimates the chain parameters by fixed-step gradient descent on the
/// negative particle log-likelihood, differentiated through the filter with
/// dual numbers. Each iteration uses a fresh child stream so gradients are
/// independent draws. A run whose iterate leaves a norm ball ten times the
/// truth, or whose filter collapses, counts as diverged; its rows stay in
/// the output with the `diverged` flag set.
fn exp_lgssm_estimate(
    cfg: &ExperimentConfig,
    s: &LgssmEstimateSettings,
) -> Result<(Vec<MetricRow>, Vec<SideTable>), HarnessError> {
    let truth = LgssmParams::new(s.theta1, s.theta2, s.dim);
    let truth_vec = [s.theta1, s.theta2];
    let divergence_norm = (10.0 * norm2(&truth_vec)).max(10.0);
    let theta0 = [s.theta1 + s.init_offset, s.theta2 + s.init_offset];
    let schemes: Vec<(String, Resampler)> = s
        .resamplers
        .iter()
        .map(|r| (resampler_spec_string(r), r.clone()))
        .collect();

    type RunBlock = (Vec<MetricRow>, Vec<Vec<String>>);
    let blocks: Vec<RunBlock> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| -> Result<RunBlock, HarnessError> {
            let seed_r = per_run_seed(cfg.seed, run);
            let root = RngStream::from_seed(seed_r);
            let (_, obs) = lgssm_simulate(&truth, s.steps, &root.split(0))?;

            let mut rows = Vec::new();
            let mut trace_rows = Vec::new();
            for (si, (spec, scheme)) in schemes.iter().enumerate() {
                let smc_cfg = SmcConfig {
                    n_particles: s.particles,
                    ess_threshold: s.ess_threshold,
                    resampler: scheme.clone(),
                };
                let iter_root = root.split(10 + si as u64);
                let mut failed = false;
                let mut objective = |theta: &[f64], iter: usize| -> (f64, Vec<f64>) {
                    let params = LgssmParams::new(
                        Dual::<2>::seed(theta[0], 0),
                        Dual::<2>::seed(theta[1], 1),
                        s.dim,
                    );
                    let result = LgssmModel::new(params, &obs).map_err(HarnessError::from).and_then(
                        |model| {
                            run_smc(&model, &smc_cfg, &iter_root.split(iter as u64))
                                .map_err(HarnessError::from)
                        },
                    );
                    match result {
                        Ok(out) => {
                            let ll = out.log_lik;
                            (-ll.value, vec![-ll.tangent[0], -ll.tangent[1]])
                        }
                        Err(_) => {
                            // A collapsed filter at an extreme iterate is a
                            // divergence of the descent, not of the sweep.
                            failed = true;
                            (f64::NAN, vec![f64::NAN; 2])
                        }
                    }
                };
                let trace = gradient_descent(
                    &mut objective,
                    &theta0,
                    s.descent_steps,
                    s.step_size,
                    divergence_norm,
                );
                let diverged = trace.diverged || failed;
                let error = norm2(&sub_vec(trace.final_theta(), &truth_vec));
                rows.push(MetricRow::new(run, seed_r, spec, "estimate_error", error));
                rows.push(MetricRow::new(
                    run,
                    seed_r,
                    spec,
                    "diverged",
                    if diverged { 1.0 } else { 0.0 },
                ));
                for i in 0..trace.values.len() {
                    trace_rows.push(vec![
                        run.to_string(),
                        seed_r.to_string(),
                        spec.clone(),
                        i.to_string(),
                        format_value(trace.thetas[i][0]),
                        format_value(trace.thetas[i][1]),
                        format_value(trace.values[i]),
                        format_value(trace.grad_norms[i]),
                    ]);
                }
            }
            Ok((rows, trace_rows))
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut trace_rows = Vec::new();
    for (block_rows, block_trace) in blocks {
        rows.extend(block_rows);
        trace_rows.extend(block_trace);
    }
    let table = SideTable {
        suffix: "trace".to_string(),
        header: "run,seed,resampler,iteration,theta1,theta2,objective,grad_norm".to_string(),
        rows: trace_rows,
    };
    Ok((rows, vec![table]))
}

// ---------------------------------------------------------------------------
// Stochastic predator-prey filtering
// ---------------------------------------------------------------------------

/// Simulates the discretised predator-prey system with Poisson counts and
/// runs a bootstrap particle filter per scheme, reporting the likelihood
/// estimate and degeneracy diagnostics. Filter collapse yields `nan` rows.
fn exp_lv_filter(
    cfg: &ExperimentConfig,
    s: &LvFilterSettings,
) -> Result<Vec<MetricRow>, HarnessError> {
    let params = LvParams {
        alpha: s.alpha,
        beta: s.beta,
        zeta: s.zeta,
        gamma: s.gamma,
        sigma: s.sigma,
        dt: s.dt,
        steps: s.steps,
        init: [1.0, 1.0],
    };
    let schemes: Vec<(String, Resampler)> = s
        .resamplers
        .iter()
        .map(|r| (resampler_spec_string(r), r.clone()))
        .collect();
    collect_runs(cfg.runs, |run| {
        let seed_r = per_run_seed(cfg.seed, run);
        let root = RngStream::from_seed(seed_r);
        let path = lv_simulate(&params, &root.split(0))?;
        let mut rows = Vec::new();
        for (si, (spec, scheme)) in schemes.iter().enumerate() {
            let smc_cfg = SmcConfig {
                n_particles: s.particles,
                ess_threshold: s.ess_threshold,
                resampler: scheme.clone(),
            };
            let model = LvModel::new(params, path.observations.clone())?;
            match run_smc(&model, &smc_cfg, &root.split(10 + si as u64)) {
                Ok(out) => {
                    rows.push(MetricRow::new(run, seed_r, spec, "log_lik", out.log_lik));
                    rows.push(MetricRow::new(
                        run,
                        seed_r,
                        spec,
                        "mean_ess_fraction",
                        mean(&out.ess_trace) / s.particles as f64,
                    ));
                    rows.push(MetricRow::new(
                        run,
                        seed_r,
                        spec,
                        "resample_count",
                        out.resample_count() as f64,
                    ));
                }
                Err(_) => {
                    for metric in ["log_lik", "mean_ess_fraction", "resample_count"] {
                        rows.push(MetricRow::new(run, seed_r, spec, metric, f64::NAN));
                    }
                }
            }
        }
        Ok(rows)
    })
}

// ---------------------------------------------------------------------------
// Cost and accuracy sweeps
// ---------------------------------------------------------------------------

fn timed_resamples(
    run: usize,
    seed_r: u64,
    scheme: &Resampler,
    metric: &str,
    ens: &WeightedEnsemble<f64>,
    root: &RngStream,
    tag: u64,
    coarse: usize,
    fine: usize,
    repeats: usize,
) -> Result<Vec<MetricRow>, HarnessError> {
    let spec = resampler_spec_string(scheme);
    // Untimed warm-up pass so one-off allocation and paging costs do not
    // land on the first measured repeat.
    resample(scheme, ens, &root.split(sweep_label(tag, coarse, fine, 255)))?;
    let mut rows = Vec::new();
    for rep in 0..repeats {
        let rng = root.split(sweep_label(tag, coarse, fine, rep));
        let start = Instant::now();
        let out = resample(scheme, ens, &rng)?;
        let wall = start.elapsed().as_nanos();
        // The target is centred, so the recovered mean's norm is the error.
        let mut row = MetricRow::new(run, seed_r, &spec, metric, norm2(&weighted_mean(&out.ensemble)));
        row.wall_ns = Some(wall);
        row.iterations = out.report.iterations;
        row.marginal_error = out.report.marginal_error;
        rows.push(row);
    }
    Ok(rows)
}

/// Measures per-resample wall time and mean-recovery error on a Gaussian
/// importance fixture, sweeping the reverse-step count for the bridge
/// scheme and the regularisation strength for the transport scheme across
/// ensemble sizes. The error metric name carries the ensemble size
/// (`mean_error_n8192`); timings live in the wall-time column, so this is
/// the one experiment whose output varies between invocations.
fn exp_timing(cfg: &ExperimentConfig, s: &TimingSettings) -> Result<Vec<MetricRow>, HarnessError> {
    collect_runs(cfg.runs, |run| {
        let seed_r = per_run_seed(cfg.seed, run);
        let root = RngStream::from_seed(seed_r);
        let mut rows = Vec::new();
        for (ni, &n) in s.particle_grid.iter().enumerate() {
            let mut fixture_rng = root.split(sweep_label(6, ni, 0, 0));
            let ens = gaussian_importance_fixture(s.dim, n, 0.0, 1.25, &mut fixture_rng)?;
            let metric = format!("mean_error_n{n}");
            for (ki, &k) in s.bridge_steps_grid.iter().enumerate() {
                let scheme = Resampler::Diffusion(DiffusionConfig {
                    t_final: s.spacing * (k + 1) as f64,
                    steps: k,
                    ..DiffusionConfig::default()
                });
                rows.extend(timed_resamples(
                    run, seed_r, &scheme, &metric, &ens, &root, 1, ni, ki, s.repeats,
                )?);
            }
            for (ei, &eps) in s.ot_eps_grid.iter().enumerate() {
                // The regularisation rides on the mean transport cost so
                // one epsilon grid stays meaningful across ensemble sizes.
                let scheme = Resampler::EntropicOt(OtConfig {
                    epsilon: eps,
                    scaling: EpsilonScaling::MeanCost,
                    max_iters: 10_000,
                    tol: 1e-6,
                    strict: false,
                });
                rows.extend(timed_resamples(
                    run, seed_r, &scheme, &metric, &ens, &root, 2, ni, ei, s.repeats,
                )?);
            }
        }
        Ok(rows)
    })
}

/// Resamples a Gaussian importance fixture with the bridge scheme across a
/// grid of ensemble sizes, horizons, and step counts, scoring each draw by
/// its sliced transport distance to fresh exact target samples (metric
/// `swd_n100` and so on). Appends one summary row per (horizon, steps)
/// pair with the log-log slope of mean distance against ensemble size.
fn exp_convergence(
    cfg: &ExperimentConfig,
    s: &ConvergenceSettings,
) -> Result<Vec<MetricRow>, HarnessError> {
    let mut rows = collect_runs(cfg.runs, |run| {
        let seed_r = per_run_seed(cfg.seed, run);
        let root = RngStream::from_seed(seed_r);
        let mut rows = Vec::new();
        for (ni, &n) in s.particle_grid.iter().enumerate() {
            let mut fixture_rng = root.split(sweep_label(6, ni, 0, 0));
            let ens = gaussian_importance_fixture(s.dim, n, 1.5, 2.0, &mut fixture_rng)?;
            let mut exact_rng = root.split(sweep_label(7, ni, 0, 0));
            let exact = Matrix::from_fn(n, s.dim, |_, _| exact_rng.draw_normal());
            let metric = format!("swd_n{n}");
            for (ci, (&t_final, &steps)) in s
                .t_grid
                .iter()
                .flat_map(|t| s.k_grid.iter().map(move |k| (t, k)))
                .enumerate()
            {
                let scheme = Resampler::Diffusion(DiffusionConfig {
                    t_final,
                    steps,
                    ..DiffusionConfig::default()
                });
                let spec = resampler_spec_string(&scheme);
                for rep in 0..s.repeats {
                    let rng = root.split(sweep_label(8, ni, ci, rep));
                    let out = resample(&scheme, &ens, &rng)?;
                    let swd = sliced_w1(
                        out.ensemble.particles(),
                        &exact,
                        s.swd_projections,
                        seed_r ^ sweep_label(8, ni, ci, rep),
                    )?;
                    rows.push(MetricRow::new(run, seed_r, &spec, &metric, swd));
                }
            }
        }
        Ok(rows)
    })?;

    // Log-log slope of the mean distance in the ensemble size, one summary
    // row per scheme variant, aggregated over runs and repeats.
    let mut summary = Vec::new();
    for &t_final in &s.t_grid {
        for &steps in &s.k_grid {
            let spec = resampler_spec_string(&Resampler::Diffusion(DiffusionConfig {
                t_final,
                steps,
                ..DiffusionConfig::default()
            }));
            let mut log_n = Vec::new();
            let mut log_swd = Vec::new();
            for &n in &s.particle_grid {
                let metric = format!("swd_n{n}");
                let values: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.resampler == spec && r.metric == metric)
                    .map(|r| r.value)
                    .collect();
                if !values.is_empty() {
                    log_n.push((n as f64).ln());
                    log_swd.push(mean(&values).ln());
                }
            }
            if log_n.len() >= 2 {
                let (slope, _, _) = linear_fit(&log_n, &log_swd);
                summary.push(MetricRow::new(
                    cfg.runs,
                    cfg.seed,
                    &spec,
                    "swd_slope_vs_particles",
                    slope,
                ));
            }
        }
    }
    rows.extend(summary);
    Ok(rows)
}
