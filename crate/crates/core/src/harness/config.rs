//! Flat key-value experiment configuration.
//!
//! A config file holds one experiment: `key = value` lines, `#` comment
//! lines, and blank lines. Every experiment has its own allowed key set and
//! unknown or duplicate keys are rejected rather than ignored, so a typo
//! cannot silently fall back to a default. Parsing and serialisation round
//! trip exactly: `parse(serialise(cfg)) == cfg`.
//!
//! Resampling schemes are written as a compact spec, one of
//! `multinomial`, `soft(alpha=0.9)`, `gumbel(tau=0.5)`,
//! `ot(eps=0.8, iters=500, tol=0.000001, scaling=absolute, strict=false)`, or
//! `diffusion(t=3, k=128, integrator=jk, flow=sde)` with optional `b=`,
//! `jitter=`, and `shortcut=` arguments. Lists of schemes are separated by
//! semicolons; numeric lists by commas.

use crate::resample::diffusion::{BMode, DiffusionConfig, Flow, Integrator};
use crate::resample::{EpsilonScaling, OtConfig, Resampler};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}` for this experiment")]
    UnknownKey(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Gm,
    LgssmFilter,
    LgssmSurface,
    LgssmEstimate,
    LvFilter,
    Timing,
    Convergence,
}

impl ExperimentKind {
    pub fn token(&self) -> &'static str {
        match self {
            ExperimentKind::Gm => "gm",
            ExperimentKind::LgssmFilter => "lgssm-filter",
            ExperimentKind::LgssmSurface => "lgssm-surface",
            ExperimentKind::LgssmEstimate => "lgssm-estimate",
            ExperimentKind::LvFilter => "lv-filter",
            ExperimentKind::Timing => "timing",
            ExperimentKind::Convergence => "convergence",
        }
    }

    pub fn parse(token: &str) -> Result<Self, ConfigError> {
        Self::all()
            .into_iter()
            .find(|k| k.token() == token)
            .ok_or_else(|| ConfigError::InvalidValue {
                key: "experiment".to_string(),
                message: format!("unknown experiment `{token}`"),
            })
    }

    pub fn all() -> [ExperimentKind; 7] {
        [
            ExperimentKind::Gm,
            ExperimentKind::LgssmFilter,
            ExperimentKind::LgssmSurface,
            ExperimentKind::LgssmEstimate,
            ExperimentKind::LvFilter,
            ExperimentKind::Timing,
            ExperimentKind::Convergence,
        ]
    }
}

/// Which way round the per-step Gaussian divergence is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    /// Divergence of the moment-matched particle law from the exact law.
    EmpiricalToTrue,
    /// The reverse direction.
    TrueToEmpirical,
}

impl KlDirection {
    pub fn token(&self) -> &'static str {
        match self {
            KlDirection::EmpiricalToTrue => "empirical-true",
            KlDirection::TrueToEmpirical => "true-empirical",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub runs: usize,
    /// Output CSV path; side tables derive their names from it.
    pub out: String,
    pub settings: Settings,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Settings {
    Gm(GmSettings),
    LgssmFilter(LgssmFilterSettings),
    LgssmSurface(LgssmSurfaceSettings),
    LgssmEstimate(LgssmEstimateSettings),
    LvFilter(LvFilterSettings),
    Timing(TimingSettings),
    Convergence(ConvergenceSettings),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmSettings {
    pub dim: usize,
    pub components: usize,
    pub particles: usize,
    pub posterior_samples: usize,
    pub swd_projections: usize,
    pub resamplers: Vec<Resampler>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LgssmFilterSettings {
    pub dim: usize,
    pub steps: usize,
    pub particles: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub ess_threshold: f64,
    pub kl_direction: KlDirection,
    pub resamplers: Vec<Resampler>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LgssmSurfaceSettings {
    pub dim: usize,
    pub steps: usize,
    pub particles: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub ess_threshold: f64,
    /// Grid nodes per parameter axis.
    pub grid: usize,
    /// Half-width of the square parameter window around the truth.
    pub span: f64,
    pub resamplers: Vec<Resampler>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LgssmEstimateSettings {
    pub dim: usize,
    pub steps: usize,
    pub particles: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub ess_threshold: f64,
    /// Added to both true parameters to form the descent start.
    pub init_offset: f64,
    pub descent_steps: usize,
    pub step_size: f64,
    pub resamplers: Vec<Resampler>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LvFilterSettings {
    pub particles: usize,
    pub ess_threshold: f64,
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub dt: f64,
    pub steps: usize,
    pub resamplers: Vec<Resampler>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingSettings {
    pub dim: usize,
    pub particle_grid: Vec<usize>,
    /// Reverse-step counts for the bridge sweep.
    pub bridge_steps_grid: Vec<u32>,
    pub ot_eps_grid: Vec<f64>,
    /// Per-step bridge spacing; the total time is `spacing * (k + 1)`.
    pub spacing: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceSettings {
    pub dim: usize,
    pub particle_grid: Vec<usize>,
    pub t_grid: Vec<f64>,
    pub k_grid: Vec<u32>,
    pub repeats: usize,
    pub swd_projections: usize,
}

impl ExperimentConfig {
    /// Defaults for an experiment, matching the documented study settings.
    pub fn default_for(kind: ExperimentKind) -> Self {
        let settings = match kind {
            ExperimentKind::Gm => Settings::Gm(GmSettings {
                dim: 8,
                components: 5,
                particles: 10_000,
                posterior_samples: 10_000,
                swd_projections: 128,
                resamplers: vec![
                    Resampler::Multinomial,
                    diffusion_spec(3.0, 128),
                    diffusion_spec(1.0, 8),
                ],
            }),
            ExperimentKind::LgssmFilter => Settings::LgssmFilter(LgssmFilterSettings {
                dim: 2,
                steps: 128,
                particles: 128,
                theta1: 0.5,
                theta2: 1.0,
                ess_threshold: 1.0,
                kl_direction: KlDirection::EmpiricalToTrue,
                resamplers: vec![
                    Resampler::Multinomial,
                    diffusion_spec(3.0, 8),
                    Resampler::Soft { alpha: 0.9 },
                    Resampler::EntropicOt(OtConfig::default()),
                ],
            }),
            ExperimentKind::LgssmSurface => Settings::LgssmSurface(LgssmSurfaceSettings {
                dim: 2,
                steps: 128,
                particles: 32,
                theta1: 0.5,
                theta2: 1.0,
                ess_threshold: 1.0,
                grid: 21,
                span: 0.1,
                resamplers: vec![Resampler::Multinomial, diffusion_spec(3.0, 8)],
            }),
            ExperimentKind::LgssmEstimate => Settings::LgssmEstimate(LgssmEstimateSettings {
                dim: 2,
                steps: 128,
                particles: 32,
                theta1: 0.5,
                theta2: 1.0,
                ess_threshold: 1.0,
                init_offset: 0.5,
                descent_steps: 300,
                step_size: 5e-3,
                resamplers: vec![diffusion_spec(3.0, 32), Resampler::Multinomial],
            }),
            ExperimentKind::LvFilter => Settings::LvFilter(LvFilterSettings {
                particles: 128,
                ess_threshold: 1.0,
                alpha: 6.0,
                beta: 2.0,
                zeta: 4.0,
                gamma: 6.0,
                sigma: 0.15,
                dt: 3.0 / 256.0,
                steps: 256,
                resamplers: vec![Resampler::Multinomial, diffusion_spec(3.0, 8)],
            }),
            ExperimentKind::Timing => Settings::Timing(TimingSettings {
                dim: 8,
                particle_grid: vec![128, 512, 2048, 8192],
                bridge_steps_grid: vec![4, 8, 16, 32],
                ot_eps_grid: vec![0.8, 0.4, 0.2, 0.1],
                spacing: 0.1,
                repeats: 5,
            }),
            ExperimentKind::Convergence => Settings::Convergence(ConvergenceSettings {
                dim: 2,
                particle_grid: vec![100, 1000, 10_000],
                t_grid: vec![0.5, 3.0],
                k_grid: vec![8, 128],
                repeats: 5,
                swd_projections: 64,
            }),
        };
        let runs = match kind {
            ExperimentKind::Timing | ExperimentKind::Convergence => 1,
            ExperimentKind::LgssmEstimate => 10,
            _ => 20,
        };
        ExperimentConfig {
            experiment: kind,
            seed: 1,
            runs,
            out: format!("{}.csv", kind.token()),
            settings,
        }
    }
}

fn diffusion_spec(t_final: f64, steps: u32) -> Resampler {
    Resampler::Diffusion(DiffusionConfig {
        t_final,
        steps,
        ..DiffusionConfig::default()
    })
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct FieldMap(BTreeMap<String, String>);

impl FieldMap {
    fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: idx + 1,
                    message: "empty key".to_string(),
                });
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        Ok(FieldMap(map))
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn take_parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e| ConfigError::InvalidValue {
                key: key.to_string(),
                message: format!("{e}"),
            }),
        }
    }

    fn take_list<T: std::str::FromStr>(
        &mut self,
        key: &str,
        default: Vec<T>,
    ) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw
                .split(',')
                .map(|item| {
                    item.trim().parse().map_err(|e| ConfigError::InvalidValue {
                        key: key.to_string(),
                        message: format!("`{}`: {e}", item.trim()),
                    })
                })
                .collect(),
        }
    }

    fn take_resamplers(
        &mut self,
        default: Vec<Resampler>,
    ) -> Result<Vec<Resampler>, ConfigError> {
        match self.take("resamplers") {
            None => Ok(default),
            Some(raw) => parse_resampler_list(&raw).map_err(|message| {
                ConfigError::InvalidValue {
                    key: "resamplers".to_string(),
                    message,
                }
            }),
        }
    }

    fn take_kl_direction(&mut self, default: KlDirection) -> Result<KlDirection, ConfigError> {
        match self.take("kl_direction").as_deref() {
            None => Ok(default),
            Some("empirical-true") => Ok(KlDirection::EmpiricalToTrue),
            Some("true-empirical") => Ok(KlDirection::TrueToEmpirical),
            Some(other) => Err(ConfigError::InvalidValue {
                key: "kl_direction".to_string(),
                message: format!("expected empirical-true or true-empirical, got `{other}`"),
            }),
        }
    }

    fn reject_remaining(self) -> Result<(), ConfigError> {
        match self.0.into_keys().next() {
            None => Ok(()),
            Some(key) => Err(ConfigError::UnknownKey(key)),
        }
    }
}

/// Parses one experiment configuration from flat key-value text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut fields = FieldMap::from_text(text)?;
    let kind_token = fields
        .take("experiment")
        .ok_or_else(|| ConfigError::MissingKey("experiment".to_string()))?;
    let kind = ExperimentKind::parse(&kind_token)?;
    let defaults = ExperimentConfig::default_for(kind);
    let seed = fields.take_parse("seed", defaults.seed)?;
    let runs = fields.take_parse("runs", defaults.runs)?;
    let out = fields.take("out").unwrap_or(defaults.out);

    let settings = match defaults.settings {
        Settings::Gm(d) => Settings::Gm(GmSettings {
            dim: fields.take_parse("dim", d.dim)?,
            components: fields.take_parse("components", d.components)?,
            particles: fields.take_parse("particles", d.particles)?,
            posterior_samples: fields.take_parse("posterior_samples", d.posterior_samples)?,
            swd_projections: fields.take_parse("swd_projections", d.swd_projections)?,
            resamplers: fields.take_resamplers(d.resamplers)?,
        }),
        Settings::LgssmFilter(d) => Settings::LgssmFilter(LgssmFilterSettings {
            dim: fields.take_parse("dim", d.dim)?,
            steps: fields.take_parse("steps", d.steps)?,
            particles: fields.take_parse("particles", d.particles)?,
            theta1: fields.take_parse("theta1", d.theta1)?,
            theta2: fields.take_parse("theta2", d.theta2)?,
            ess_threshold: fields.take_parse("ess_threshold", d.ess_threshold)?,
            kl_direction: fields.take_kl_direction(d.kl_direction)?,
            resamplers: fields.take_resamplers(d.resamplers)?,
        }),
        Settings::LgssmSurface(d) => Settings::LgssmSurface(LgssmSurfaceSettings {
            dim: fields.take_parse("dim", d.dim)?,
            steps: fields.take_parse("steps", d.steps)?,
            particles: fields.take_parse("particles", d.particles)?,
            theta1: fields.take_parse("theta1", d.theta1)?,
            theta2: fields.take_parse("theta2", d.theta2)?,
            ess_threshold: fields.take_parse("ess_threshold", d.ess_threshold)?,
            grid: fields.take_parse("grid", d.grid)?,
            span: fields.take_parse("span", d.span)?,
            resamplers: fields.take_resamplers(d.resamplers)?,
        }),
        Settings::LgssmEstimate(d) => Settings::LgssmEstimate(LgssmEstimateSettings {
            dim: fields.take_parse("dim", d.dim)?,
            steps: fields.take_parse("steps", d.steps)?,
            particles: fields.take_parse("particles", d.particles)?,
            theta1: fields.take_parse("theta1", d.theta1)?,
            theta2: fields.take_parse("theta2", d.theta2)?,
            ess_threshold: fields.take_parse("ess_threshold", d.ess_threshold)?,
            init_offset: fields.take_parse("init_offset", d.init_offset)?,
            descent_steps: fields.take_parse("descent_steps", d.descent_steps)?,
            step_size: fields.take_parse("step_size", d.step_size)?,
            resamplers: fields.take_resamplers(d.resamplers)?,
        }),
        Settings::LvFilter(d) => Settings::LvFilter(LvFilterSettings {
            particles: fields.take_parse("particles", d.particles)?,
            ess_threshold: fields.take_parse("ess_threshold", d.ess_threshold)?,
            alpha: fields.take_parse("alpha", d.alpha)?,
            beta: fields.take_parse("beta", d.beta)?,
            zeta: fields.take_parse("zeta", d.zeta)?,
            gamma: fields.take_parse("gamma", d.gamma)?,
            sigma: fields.take_parse("sigma", d.sigma)?,
            dt: fields.take_parse("dt", d.dt)?,
            steps: fields.take_parse("steps", d.steps)?,
            resamplers: fields.take_resamplers(d.resamplers)?,
        }),
        Settings::Timing(d) => Settings::Timing(TimingSettings {
            dim: fields.take_parse("dim", d.dim)?,
            particle_grid: fields.take_list("particle_grid", d.particle_grid)?,
            bridge_steps_grid: fields.take_list("bridge_steps_grid", d.bridge_steps_grid)?,
            ot_eps_grid: fields.take_list("ot_eps_grid", d.ot_eps_grid)?,
            spacing: fields.take_parse("spacing", d.spacing)?,
            repeats: fields.take_parse("repeats", d.repeats)?,
        }),
        Settings::Convergence(d) => Settings::Convergence(ConvergenceSettings {
            dim: fields.take_parse("dim", d.dim)?,
            particle_grid: fields.take_list("particle_grid", d.particle_grid)?,
            t_grid: fields.take_list("t_grid", d.t_grid)?,
            k_grid: fields.take_list("k_grid", d.k_grid)?,
            repeats: fields.take_parse("repeats", d.repeats)?,
            swd_projections: fields.take_parse("swd_projections", d.swd_projections)?,
        }),
    };
    fields.reject_remaining()?;
    Ok(ExperimentConfig {
        experiment: kind,
        seed,
        runs,
        out,
        settings,
    })
}

/// Canonical text form of a configuration; parsing it reproduces the config.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut push = |key: &str, value: String| {
        let _ = writeln!(out, "{key} = {value}");
    };
    push("experiment", cfg.experiment.token().to_string());
    push("seed", cfg.seed.to_string());
    push("runs", cfg.runs.to_string());
    push("out", cfg.out.clone());
    match &cfg.settings {
        Settings::Gm(s) => {
            push("dim", s.dim.to_string());
            push("components", s.components.to_string());
            push("particles", s.particles.to_string());
            push("posterior_samples", s.posterior_samples.to_string());
            push("swd_projections", s.swd_projections.to_string());
            push("resamplers", resampler_list_string(&s.resamplers));
        }
        Settings::LgssmFilter(s) => {
            push("dim", s.dim.to_string());
            push("steps", s.steps.to_string());
            push("particles", s.particles.to_string());
            push("theta1", s.theta1.to_string());
            push("theta2", s.theta2.to_string());
            push("ess_threshold", s.ess_threshold.to_string());
            push("kl_direction", s.kl_direction.token().to_string());
            push("resamplers", resampler_list_string(&s.resamplers));
        }
        Settings::LgssmSurface(s) => {
            push("dim", s.dim.to_string());
            push("steps", s.steps.to_string());
            push("particles", s.particles.to_string());
            push("theta1", s.theta1.to_string());
            push("theta2", s.theta2.to_string());
            push("ess_threshold", s.ess_threshold.to_string());
            push("grid", s.grid.to_string());
            push("span", s.span.to_string());
            push("resamplers", resampler_list_string(&s.resamplers));
        }
        Settings::LgssmEstimate(s) => {
            push("dim", s.dim.to_string());
            push("steps", s.steps.to_string());
            push("particles", s.particles.to_string());
            push("theta1", s.theta1.to_string());
            push("theta2", s.theta2.to_string());
            push("ess_threshold", s.ess_threshold.to_string());
            push("init_offset", s.init_offset.to_string());
            push("descent_steps", s.descent_steps.to_string());
            push("step_size", s.step_size.to_string());
            push("resamplers", resampler_list_string(&s.resamplers));
        }
        Settings::LvFilter(s) => {
            push("particles", s.particles.to_string());
            push("ess_threshold", s.ess_threshold.to_string());
            push("alpha", s.alpha.to_string());
            push("beta", s.beta.to_string());
            push("zeta", s.zeta.to_string());
            push("gamma", s.gamma.to_string());
            push("sigma", s.sigma.to_string());
            push("dt", s.dt.to_string());
            push("steps", s.steps.to_string());
            push("resamplers", resampler_list_string(&s.resamplers));
        }
        Settings::Timing(s) => {
            push("dim", s.dim.to_string());
            push("particle_grid", join_list(&s.particle_grid));
            push("bridge_steps_grid", join_list(&s.bridge_steps_grid));
            push("ot_eps_grid", join_list(&s.ot_eps_grid));
            push("spacing", s.spacing.to_string());
            push("repeats", s.repeats.to_string());
        }
        Settings::Convergence(s) => {
            push("dim", s.dim.to_string());
            push("particle_grid", join_list(&s.particle_grid));
            push("t_grid", join_list(&s.t_grid));
            push("k_grid", join_list(&s.k_grid));
            push("repeats", s.repeats.to_string());
            push("swd_projections", s.swd_projections.to_string());
        }
    }
    out
}

fn join_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// 64-bit FNV-1a hash of the canonical serialisation, as fixed-width hex.
/// The output path is excluded: the hash identifies what determines the
/// results, so redirecting the same experiment elsewhere keeps its hash.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for line in serialize_config(cfg).lines() {
        if line.starts_with("out = ") {
            continue;
        }
        for byte in line.bytes().chain([b'\n']) {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{hash:016x}")
}

// ---------------------------------------------------------------------------
// Resampler mini-spec
// ---------------------------------------------------------------------------

/// Parses a semicolon-separated list of scheme specs.
pub fn parse_resampler_list(text: &str) -> Result<Vec<Resampler>, String> {
    let items: Vec<&str> = text
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err("at least one scheme is required".to_string());
    }
    items.into_iter().map(parse_resampler).collect()
}

/// Parses one scheme spec such as `diffusion(t=3, k=8, integrator=jk)`.
pub fn parse_resampler(text: &str) -> Result<Resampler, String> {
    let text = text.trim();
    let (name, args) = match text.split_once('(') {
        None => (text, Vec::new()),
        Some((name, rest)) => {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| format!("missing closing parenthesis in `{text}`"))?;
            let mut args = Vec::new();
            for part in inner.split(',') {
                let part = part.trim();
                if part.is_empty() {
                    continue;
                }
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| format!("expected `key=value`, got `{part}`"))?;
                args.push((k.trim().to_string(), v.trim().to_string()));
            }
            (name.trim(), args)
        }
    };

    let mut args: BTreeMap<String, String> = {
        let mut map = BTreeMap::new();
        for (k, v) in args {
            if map.insert(k.clone(), v).is_some() {
                return Err(format!("duplicate argument `{k}`"));
            }
        }
        map
    };
    fn num(
        args: &mut BTreeMap<String, String>,
        key: &str,
        default: f64,
    ) -> Result<f64, String> {
        match args.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| format!("argument `{key}`: {e}")),
        }
    }

    let scheme = match name {
        "multinomial" => Resampler::Multinomial,
        "soft" => Resampler::Soft {
            alpha: num(&mut args, "alpha", 0.9)?,
        },
        "gumbel" => Resampler::GumbelSoftmax {
            tau: num(&mut args, "tau", 0.5)?,
        },
        "ot" => {
            let defaults = OtConfig::default();
            let scaling = match args.remove("scaling").as_deref() {
                None => defaults.scaling,
                Some("absolute") => EpsilonScaling::Absolute,
                Some("mean") => EpsilonScaling::MeanCost,
                Some(other) => return Err(format!("unknown scaling `{other}`")),
            };
            let strict = match args.remove("strict").as_deref() {
                None => defaults.strict,
                Some(v) => v
                    .parse()
                    .map_err(|_| format!("argument `strict`: expected a bool, got `{v}`"))?,
            };
            Resampler::EntropicOt(OtConfig {
                epsilon: num(&mut args, "eps", defaults.epsilon)?,
                scaling,
                max_iters: num(&mut args, "iters", defaults.max_iters as f64)? as u32,
                tol: num(&mut args, "tol", defaults.tol)?,
                strict,
            })
        }
        "diffusion" => {
            let defaults = DiffusionConfig::default();
            let integrator = match args.remove("integrator").as_deref() {
                None => defaults.integrator,
                Some("em") => Integrator::EulerMaruyama,
                Some("jk") => Integrator::ExponentialEuler,
                Some("lr") => Integrator::ExponentialRectangle,
                Some("tweedie") => Integrator::TweedieBridge,
                Some(other) => return Err(format!("unknown integrator `{other}`")),
            };
            let flow = match args.remove("flow").as_deref() {
                None => defaults.flow,
                Some("sde") => Flow::Sde,
                Some("ode") => Flow::Ode,
                Some(other) => return Err(format!("unknown flow `{other}`")),
            };
            let b_mode = match args.remove("b") {
                None => BMode::Matched,
                Some(v) => BMode::Scalar(
                    v.parse()
                        .map_err(|e| format!("argument `b`: {e}"))?,
                ),
            };
            let jitter = match args.remove("jitter") {
                None => None,
                Some(v) => Some(
                    v.parse()
                        .map_err(|e| format!("argument `jitter`: {e}"))?,
                ),
            };
            let shortcut = match args.remove("shortcut").as_deref() {
                None => false,
                Some(v) => v
                    .parse()
                    .map_err(|_| format!("argument `shortcut`: expected a bool, got `{v}`"))?,
            };
            Resampler::Diffusion(DiffusionConfig {
                t_final: num(&mut args, "t", defaults.t_final)?,
                steps: num(&mut args, "k", defaults.steps as f64)? as u32,
                integrator,
                flow,
                b_mode,
                jitter,
                single_particle_shortcut: shortcut,
            })
        }
        other => return Err(format!("unknown scheme `{other}`")),
    };
    match args.into_keys().next() {
        None => Ok(scheme),
        Some(key) => Err(format!("unknown argument `{key}` for `{name}`")),
    }
}

/// Complete spec string for a scheme; parsing it reproduces the scheme.
pub fn resampler_spec_string(r: &Resampler) -> String {
    match r {
        Resampler::Multinomial => "multinomial".to_string(),
        Resampler::Soft { alpha } => format!("soft(alpha={alpha})"),
        Resampler::GumbelSoftmax { tau } => format!("gumbel(tau={tau})"),
        Resampler::EntropicOt(cfg) => {
            let scaling = match cfg.scaling {
                EpsilonScaling::Absolute => "absolute",
                EpsilonScaling::MeanCost => "mean",
            };
            format!(
                "ot(eps={}, iters={}, tol={}, scaling={scaling}, strict={})",
                cfg.epsilon, cfg.max_iters, cfg.tol, cfg.strict
            )
        }
        Resampler::Diffusion(cfg) => {
            let mut spec = format!(
                "diffusion(t={}, k={}, integrator={}, flow={}",
                cfg.t_final,
                cfg.steps,
                cfg.integrator.token(),
                cfg.flow.token()
            );
            if let BMode::Scalar(b) = cfg.b_mode {
                let _ = write!(spec, ", b={b}");
            }
            if let Some(j) = cfg.jitter {
                let _ = write!(spec, ", jitter={j}");
            }
            if cfg.single_particle_shortcut {
                spec.push_str(", shortcut=true");
            }
            spec.push(')');
            spec
        }
    }
}

fn resampler_list_string(list: &[Resampler]) -> String {
    list.iter()
        .map(resampler_spec_string)
        .collect::<Vec<_>>()
        .join("; ")
}
