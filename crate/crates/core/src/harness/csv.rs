//! CSV output for experiment results.
//!
//! Every file starts with a block of `# key=value` metadata lines (config
//! hash, git revision, experiment identity) followed by a header row and
//! data rows. The main metrics file has a fixed schema; experiments with
//! richer output (likelihood grids, descent traces) write side tables whose
//! names derive from the main output path.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

/// One measurement: a named scalar for a (run, scheme) pair, with optional
/// solver diagnostics attached.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run: usize,
    /// The derived per-run seed, so any single run can be reproduced alone.
    pub seed: u64,
    pub resampler: String,
    pub metric: String,
    pub value: f64,
    pub iterations: Option<u32>,
    pub wall_ns: Option<u128>,
    pub marginal_error: Option<f64>,
}

impl MetricRow {
    pub fn new(run: usize, seed: u64, resampler: &str, metric: &str, value: f64) -> Self {
        MetricRow {
            run,
            seed,
            resampler: resampler.to_string(),
            metric: metric.to_string(),
            value,
            iterations: None,
            wall_ns: None,
            marginal_error: None,
        }
    }
}

pub const METRIC_HEADER: &str =
    "run,seed,resampler,metric,value,iterations,wall_time_ns,marginal_error";

/// Formats a value for CSV: any non-finite number becomes the literal `nan`.
pub fn format_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".to_string()
    }
}

/// Quotes a cell if it holds a comma, quote, or newline, doubling any quotes.
pub fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn metric_line(row: &MetricRow) -> String {
    let iterations = row.iterations.map(|v| v.to_string()).unwrap_or_default();
    let wall = row.wall_ns.map(|v| v.to_string()).unwrap_or_default();
    let marginal = row.marginal_error.map(format_value).unwrap_or_default();
    format!(
        "{},{},{},{},{},{iterations},{wall},{marginal}",
        row.run,
        row.seed,
        csv_field(&row.resampler),
        csv_field(&row.metric),
        format_value(row.value)
    )
}

fn write_lines(
    path: &Path,
    meta: &[(String, String)],
    header: &str,
    lines: impl Iterator<Item = String>,
) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (key, value) in meta {
        writeln!(file, "# {key}={value}")?;
    }
    writeln!(file, "{header}")?;
    for line in lines {
        writeln!(file, "{line}")?;
    }
    file.flush()
}

/// Writes the fixed-schema metrics file.
pub fn write_metric_csv(
    path: &Path,
    meta: &[(String, String)],
    rows: &[MetricRow],
) -> std::io::Result<()> {
    write_lines(path, meta, METRIC_HEADER, rows.iter().map(metric_line))
}

/// Writes a free-form side table (grid values, descent traces).
pub fn write_table_csv(
    path: &Path,
    meta: &[(String, String)],
    header: &str,
    rows: &[Vec<String>],
) -> std::io::Result<()> {
    write_lines(
        path,
        meta,
        header,
        rows.iter()
            .map(|r| r.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(",")),
    )
}

/// Path for a side table: `out.csv` plus suffix `grid` gives `out_grid.csv`.
pub fn side_table_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

/// Current git revision, or `unknown` outside a repository.
pub fn git_revision() -> String {
    Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("diffres-csv-{}-{name}", std::process::id()))
    }

    #[test]
    fn metric_file_layout_is_meta_header_rows() {
        let path = temp_path("layout.csv");
        let mut row = MetricRow::new(0, 42, "multinomial", "swd", 0.125);
        row.iterations = Some(17);
        row.marginal_error = Some(1e-7);
        let meta = vec![
            ("experiment".to_string(), "gm".to_string()),
            ("config_hash".to_string(), "abcd".to_string()),
        ];
        write_metric_csv(&path, &meta, &[row]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# experiment=gm");
        assert_eq!(lines[1], "# config_hash=abcd");
        assert_eq!(lines[2], METRIC_HEADER);
        assert_eq!(lines[3], "0,42,multinomial,swd,0.125,17,,0.0000001");
        assert_eq!(lines.len(), 4);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn non_finite_values_print_as_nan() {
        assert_eq!(format_value(f64::NAN), "nan");
        assert_eq!(format_value(f64::INFINITY), "nan");
        assert_eq!(format_value(f64::NEG_INFINITY), "nan");
        assert_eq!(format_value(0.5), "0.5");
        let row = MetricRow::new(3, 7, "soft(alpha=0.9)", "estimate_error", f64::NAN);
        assert_eq!(metric_line(&row), "3,7,soft(alpha=0.9),estimate_error,nan,,,");
    }

    #[test]
    fn fields_with_commas_are_quoted() {
        assert_eq!(csv_field("multinomial"), "multinomial");
        assert_eq!(csv_field("diffusion(t=3, k=8)"), "\"diffusion(t=3, k=8)\"");
        assert_eq!(csv_field("a\"b"), "\"a\"\"b\"");
        let row = MetricRow::new(0, 1, "diffusion(t=3, k=8)", "swd", 1.0);
        assert_eq!(metric_line(&row), "0,1,\"diffusion(t=3, k=8)\",swd,1,,,");
    }

    #[test]
    fn side_table_paths_share_the_stem() {
        assert_eq!(
            side_table_path(Path::new("results/gm.csv"), "grid"),
            PathBuf::from("results/gm_grid.csv")
        );
        assert_eq!(
            side_table_path(Path::new("run.csv"), "trace"),
            PathBuf::from("run_trace.csv")
        );
    }

    #[test]
    fn table_writer_joins_cells() {
        let path = temp_path("table.csv");
        write_table_csv(
            &path,
            &[("experiment".to_string(), "lgssm-surface".to_string())],
            "run,theta1,theta2,log_lik",
            &[vec![
                "0".to_string(),
                "0.5".to_string(),
                "1".to_string(),
                "-201.25".to_string(),
            ]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with("0,0.5,1,-201.25\n"));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn git_revision_reports_something() {
        let rev = git_revision();
        assert!(!rev.is_empty());
    }
}
