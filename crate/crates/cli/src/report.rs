//! Report rendering: every metrics report is written twice, as a flat
//! key-value text document and as JSON. Output is deterministic so reruns
//! with identical configs produce byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use cosood::detect::MetricsReport;
use cosood::error::{Error, Result};

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

/// Flat key-value rendering of one report.
pub fn render_text(report: &MetricsReport) -> String {
    let mut out = String::from("# cosood metrics report\n");
    out.push_str(&format!("ood_set = {}\n", report.ood_name));
    out.push_str(&format!("n_id = {}\n", report.n_id));
    out.push_str(&format!("n_ood = {}\n", report.n_ood));
    out.push_str(&format!("auroc = {:.6}\n", report.auroc));
    out.push_str(&format!("aupr_in = {:.6}\n", report.aupr_in));
    out.push_str(&format!("aupr_out = {:.6}\n", report.aupr_out));
    out.push_str(&format!("aupr_succ = {}\n", fmt_opt(report.aupr_succ)));
    out.push_str(&format!("aupr_err = {}\n", fmt_opt(report.aupr_err)));
    out.push_str(&format!(
        "fpr_at_95_tpr = {:.6} (auxiliary)\n",
        report.fpr_at_95_tpr
    ));
    out.push_str(&format!("id_accuracy = {:.6}\n", report.id_accuracy));
    out.push_str(&format!("seed = {}\n", report.seed));
    out.push_str(&format!("config = {}\n", report.config));
    out
}

/// Write `<base>.txt` and `<base>.json`.
pub fn write_report(report: &MetricsReport, base: &Path) -> Result<()> {
    write_file(&base.with_extension("txt"), &render_text(report))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidParams(format!("report serialization failed: {e}")))?;
    write_file(&base.with_extension("json"), &(json + "\n"))
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std, n }
}

/// Aggregate of per-seed reports for one OOD set.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub ood_name: String,
    pub n_runs: usize,
    pub metrics: BTreeMap<String, MeanStd>,
    pub config: String,
    pub seeds: Vec<String>,
}

pub fn aggregate_reports(reports: &[MetricsReport]) -> AggregateReport {
    assert!(!reports.is_empty());
    let mut metrics = BTreeMap::new();
    let collect = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<f64> {
        reports.iter().filter_map(f).collect()
    };
    let mut put = |name: &str, values: Vec<f64>| {
        if !values.is_empty() {
            metrics.insert(name.to_string(), mean_std(&values));
        }
    };
    put("auroc", collect(&|r| Some(r.auroc)));
    put("aupr_in", collect(&|r| Some(r.aupr_in)));
    put("aupr_out", collect(&|r| Some(r.aupr_out)));
    put("aupr_succ", collect(&|r| r.aupr_succ));
    put("aupr_err", collect(&|r| r.aupr_err));
    put("fpr_at_95_tpr", collect(&|r| Some(r.fpr_at_95_tpr)));
    put("id_accuracy", collect(&|r| Some(r.id_accuracy)));
    AggregateReport {
        ood_name: reports[0].ood_name.clone(),
        n_runs: reports.len(),
        metrics,
        config: reports[0].config.clone(),
        seeds: reports.iter().map(|r| r.seed.clone()).collect(),
    }
}

pub fn render_aggregate_text(agg: &AggregateReport) -> String {
    let mut out = String::from("# cosood aggregate report\n");
    out.push_str(&format!("ood_set = {}\n", agg.ood_name));
    out.push_str(&format!("n_runs = {}\n", agg.n_runs));
    out.push_str(&format!("seeds = {}\n", agg.seeds.join(",")));
    for (name, ms) in &agg.metrics {
        out.push_str(&format!(
            "{name} = {:.6} +/- {:.6} (n={})\n",
            ms.mean, ms.std, ms.n
        ));
    }
    out.push_str(&format!("config = {}\n", agg.config));
    out
}

pub fn write_aggregate(agg: &AggregateReport, base: &Path) -> Result<()> {
    write_file(&base.with_extension("txt"), &render_aggregate_text(agg))?;
    let json = serde_json::to_string_pretty(agg)
        .map_err(|e| Error::InvalidParams(format!("aggregate serialization failed: {e}")))?;
    write_file(&base.with_extension("json"), &(json + "\n"))
}

/// Sanitize a dataset name for use in file names.
pub fn file_tag(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
