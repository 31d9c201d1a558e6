//! Run outputs (`metrics.csv`, `report.json`, `iterations.csv`) and the
//! cross-run comparison table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::RunReport;

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ITERATIONS_FILE: &str = "iterations.csv";

pub const METRICS_HEADER: &str = "epoch,loss,train_acc,test_acc,alpha,epsilon,frozen_count,epoch_flops";
pub const ITERATIONS_HEADER: &str = "epoch,iteration,loss,alpha_before,epsilon_before,dot,alpha,epsilon";

pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for e in &report.epochs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.epoch, e.loss, e.train_acc, e.test_acc, e.alpha, e.epsilon, e.frozen_count, e.epoch_flops
        );
    }
    out
}

pub fn iterations_csv(report: &RunReport) -> String {
    let mut out = String::from(ITERATIONS_HEADER);
    out.push('\n');
    for r in &report.iterations {
        let dot = r.dot.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.iteration, r.loss, r.alpha_before, r.epsilon_before, dot, r.alpha, r.epsilon
        );
    }
    out
}

pub fn report_json(report: &RunReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Json {
        path: PathBuf::from(REPORT_FILE),
        source: e,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmittedFiles {
    pub metrics: PathBuf,
    pub report: PathBuf,
    pub iterations: PathBuf,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the three output files into `dir`, creating it if needed.
pub fn emit_metrics(report: &RunReport, dir: &Path) -> Result<EmittedFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = EmittedFiles {
        metrics: dir.join(METRICS_FILE),
        report: dir.join(REPORT_FILE),
        iterations: dir.join(ITERATIONS_FILE),
    };
    write(&files.metrics, &metrics_csv(report))?;
    write(&files.report, &report_json(report)?)?;
    write(&files.iterations, &iterations_csv(report))?;
    Ok(files)
}

/// Loads `report.json` from a run directory (or the file itself).
pub fn load_report(path: &Path) -> Result<RunReport> {
    let file = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: file, source: e })
}

/// Human-readable run summary.
pub fn summarize(report: &RunReport) -> String {
    let c = &report.config;
    let f = &report.flops;
    let mut out = String::new();
    let _ = writeln!(out, "mode:            {}", c.mode);
    let _ = writeln!(out, "model:           {}", c.model);
    let _ = writeln!(out, "dataset:         {}", c.dataset);
    let _ = writeln!(out, "seed:            {}", c.seed);
    let _ = writeln!(out, "epochs:          {}", report.epochs.len());
    let _ = writeln!(out, "train accuracy:  {:.2}%", 100.0 * report.final_train_acc);
    let _ = writeln!(out, "test accuracy:   {:.2}%", 100.0 * report.final_test_acc);
    let _ = writeln!(out, "FLOPs saved:     {:.2}%", f.flops_saved_percent);
    let _ = writeln!(out, "baseline FLOPs:  {}", f.baseline_total);
    let _ = writeln!(out, "spent FLOPs:     {}", f.spent_total);
    let _ = writeln!(
        out,
        "probe FLOPs:     {} ({})",
        f.probe_overhead,
        if f.count_probe_overhead { "counted" } else { "not counted" }
    );
    let _ = writeln!(out, "hyper FLOPs:     {}", f.hyper_flops);
    if let Some(last) = report.epochs.last() {
        let _ = writeln!(out, "final alpha:     {}", last.alpha);
        let _ = writeln!(out, "final epsilon:   {}", last.epsilon);
        let _ = writeln!(out, "frozen (last):   {}", last.frozen_count);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub mode: String,
    pub flops_saved_percent: f64,
    pub final_test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Differences in model or dataset between the compared runs.
    pub warnings: Vec<String>,
}

/// One row per run, in the order given. Runs on different models or
/// datasets are still compared, with a warning attached.
pub fn compare_runs(runs: &[(String, RunReport)]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::Contract(format!("compare needs at least 2 reports, got {}", runs.len())));
    }
    let (first_label, first) = &runs[0];
    let mut warnings = Vec::new();
    for (label, r) in &runs[1..] {
        if r.config.model != first.config.model {
            warnings.push(format!(
                "{label}: model {} differs from {first_label}: {}",
                r.config.model, first.config.model
            ));
        }
        if r.config.dataset != first.config.dataset {
            warnings.push(format!(
                "{label}: dataset {} differs from {first_label}: {}",
                r.config.dataset, first.config.dataset
            ));
        }
    }
    let rows = runs
        .iter()
        .map(|(label, r)| ComparisonRow {
            label: label.clone(),
            mode: r.config.mode.to_string(),
            flops_saved_percent: r.flops.flops_saved_percent,
            final_test_acc: r.final_test_acc,
        })
        .collect();
    Ok(Comparison { rows, warnings })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(3);
        let mut out = String::new();
        let _ = writeln!(out, "{:<w$}  {:<9}  {:>11}  {:>8}", "run", "mode", "FLOPs saved", "Top-1");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<w$}  {:<9}  {:>10.2}%  {:>7.2}%",
                r.label,
                r.mode,
                r.flops_saved_percent,
                100.0 * r.final_test_acc
            );
        }
        for warning in &self.warnings {
            let _ = writeln!(out, "warning: {warning}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,mode,flops_saved_percent,final_test_acc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.2},{}",
                r.label, r.mode, r.flops_saved_percent, r.final_test_acc
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Mode, TrainConfig};
    use crate::data::DatasetSpec;
    use crate::model::ModelSpec;
    use crate::train::run_training;

    fn tiny(mode: Mode) -> RunReport {
        let c = TrainConfig {
            model: ModelSpec::Mlp(vec![4, 3]),
            dataset: DatasetSpec::SyntheticBlobs {
                classes: 3,
                dims: 4,
                samples: 60,
            },
            epochs: 4,
            batch_size: 8,
            probe_size: 5,
            ..TrainConfig::for_mode(mode)
        };
        run_training(&c).unwrap()
    }

    #[test]
    fn csv_has_header_plus_one_row_per_epoch() {
        let csv = metrics_csv(&tiny(Mode::Scotti));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], METRICS_HEADER);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn emit_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let r = tiny(Mode::Scotti);
        let files = emit_metrics(&r, dir.path()).unwrap();
        assert!(files.iterations.exists());
        let back = load_report(dir.path()).unwrap();
        assert_eq!(back.epochs, r.epochs);
        assert_eq!(back.config, r.config);
        assert_eq!(back.flops, r.flops);
    }

    #[test]
    fn missing_report_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_report(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn comparison_rows() {
        let runs = vec![
            ("base".to_string(), tiny(Mode::Baseline)),
            ("sc".to_string(), tiny(Mode::Scotti)),
        ];
        let c = compare_runs(&runs).unwrap();
        assert_eq!(c.rows.len(), 2);
        assert!(c.warnings.is_empty());
        assert!(c.to_text().contains("0.00%"));
        assert!(c.to_csv().lines().nth(1).unwrap().starts_with("base,baseline,0.00,"));
        assert!(matches!(compare_runs(&runs[..1]), Err(Error::Contract(_))));
    }

    #[test]
    fn mismatched_specs_warn() {
        let mut other = tiny(Mode::Scotti);
        other.config.model = ModelSpec::Mlp(vec![4, 5, 3]);
        let runs = vec![("a".to_string(), tiny(Mode::Baseline)), ("b".to_string(), other)];
        let c = compare_runs(&runs).unwrap();
        assert_eq!(c.warnings.len(), 1);
        assert!(c.to_text().contains("warning"));
    }
}
