//! Command-line driver for the benchmark experiments.
//!
//! Selects an experiment by name, optionally loads a flat key-value config
//! file, applies command-line overrides, runs the experiment, and writes
//! the result CSVs. A short per-metric summary is printed on completion.

use clap::Parser;
use diffres_core::harness::{
    parse_config, run_experiment, write_artifacts, ExperimentConfig, ExperimentKind,
};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "diffres",
    version,
    about = "Benchmark harness for gradient-capable particle-filter resampling"
)]
struct Cli {
    /// Experiment to run: gm, lgssm-filter, lgssm-surface, lgssm-estimate,
    /// lv-filter, timing, or convergence.
    experiment: String,
    /// Flat key-value config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of independent runs override.
    #[arg(long)]
    runs: Option<usize>,
    /// Worker threads; defaults to one per logical CPU.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let kind = ExperimentKind::parse(&cli.experiment)?;
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("reading {}: {e}", path.display()))?;
            let cfg = parse_config(&text)?;
            if cfg.experiment != kind {
                return Err(format!(
                    "the config file describes `{}` but `{}` was requested",
                    cfg.experiment.token(),
                    kind.token()
                )
                .into());
            }
            cfg
        }
        None => ExperimentConfig::default_for(kind),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = cli.runs {
        cfg.runs = runs;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.to_string_lossy().into_owned();
    }
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }

    let artifacts = run_experiment(&cfg)?;
    let paths = write_artifacts(&cfg, &artifacts)?;

    println!(
        "{}: {} runs from seed {}, {} rows",
        cfg.experiment.token(),
        cfg.runs,
        cfg.seed,
        artifacts.rows.len()
    );
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for row in &artifacts.rows {
        groups
            .entry((row.resampler.as_str(), row.metric.as_str()))
            .or_default()
            .push(row.value);
    }
    for ((resampler, metric), values) in groups {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            println!("  {resampler} | {metric}: nan in all {} rows", values.len());
            continue;
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        if finite.len() > 1 {
            let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            println!(
                "  {resampler} | {metric}: mean {mean:.6} sd {:.6} ({} rows)",
                var.sqrt(),
                finite.len()
            );
        } else {
            println!("  {resampler} | {metric}: {mean:.6}");
        }
    }
    for path in paths {
        println!("wrote {}", path.display());
    }
    Ok(())
}
