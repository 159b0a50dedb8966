//! Output files of a detection run.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::heatmap::{render_heatmap, HeatmapStyle};
use crate::pipeline::{DetectionReport, Diagnostics, StageTimings};

pub const REPORT_JSON: &str = "report.json";
pub const VERDICTS_CSV: &str = "verdicts.csv";
pub const CLUSTERS_CSV: &str = "clusters.csv";
pub const HEATMAP_PPM: &str = "corr_heatmap.ppm";
pub const TRACE_CSV: &str = "trace.csv";

#[derive(Error, Debug)]
pub enum ReportError {
    #[error("i/o failure on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output to {}: {source}", .path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Pretty JSON of the whole report. Contains no timings, so equal inputs give equal bytes.
pub fn report_json(report: &DetectionReport) -> Result<String, ReportError> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_verdicts(report: &DetectionReport, path: &Path) -> Result<(), ReportError> {
    let rows = report
        .models
        .iter()
        .map(|m| {
            vec![
                m.model_id.clone(),
                m.split.to_string(),
                m.truth.to_string(),
                m.decision.verdict.to_string(),
                m.decision.score.to_string(),
                m.decision.max_ref_corr.to_string(),
                m.decision.min_adj_p.to_string(),
            ]
        })
        .collect();
    write_rows(
        path,
        &["model_id", "split", "truth", "verdict", "score", "max_ref_corr", "min_adj_p"],
        rows,
    )
}

pub fn write_clusters(report: &DetectionReport, path: &Path) -> Result<(), ReportError> {
    let trojan = report.clustering.trojan_cluster;
    let rows = report
        .models
        .iter()
        .map(|m| {
            vec![
                m.model_id.clone(),
                m.truth.to_string(),
                m.contribution[0].to_string(),
                m.contribution[1].to_string(),
                m.cluster.to_string(),
                (m.cluster == trojan).to_string(),
            ]
        })
        .collect();
    write_rows(path, &["model_id", "truth", "component_1", "component_2", "cluster", "trojan_cluster"], rows)
}

/// Cost (IVA) or fit (PARAFAC2) per iteration.
pub fn write_trace(report: &DetectionReport, path: &Path) -> Result<(), ReportError> {
    let (name, values) = match &report.diagnostics {
        Diagnostics::Iva { cost_trace, .. } => ("cost", cost_trace),
        Diagnostics::Parafac2 { fit_trace, .. } => ("fit", fit_trace),
    };
    let rows = values
        .iter()
        .enumerate()
        .map(|(i, v)| vec![(i + 1).to_string(), v.to_string()])
        .collect();
    write_rows(path, &["iteration", name], rows)
}

pub fn write_timings(rows: &[(String, StageTimings)], path: &Path) -> Result<(), ReportError> {
    let rows = rows
        .iter()
        .map(|(method, t)| {
            vec![
                method.clone(),
                format!("{:.6}", t.ingest.as_secs_f64()),
                format!("{:.6}", t.features.as_secs_f64()),
                format!("{:.6}", t.decomposition.as_secs_f64()),
                format!("{:.6}", t.stats.as_secs_f64()),
                format!("{:.6}", t.total().as_secs_f64()),
            ]
        })
        .collect();
    write_rows(
        path,
        &["method", "ingest_s", "features_s", "decomposition_s", "stats_s", "total_s"],
        rows,
    )
}

/// Writes every output file of a run into `dir`.
pub fn write_all(report: &DetectionReport, dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join(REPORT_JSON);
    fs::write(&json, report_json(report)?).map_err(io_err(&json))?;
    write_verdicts(report, &dir.join(VERDICTS_CSV))?;
    write_clusters(report, &dir.join(CLUSTERS_CSV))?;
    write_trace(report, &dir.join(TRACE_CSV))?;
    let heat = dir.join(HEATMAP_PPM);
    let image = render_heatmap(&report.correlation, &HeatmapStyle::default());
    fs::write(&heat, image.to_ppm()).map_err(io_err(&heat))?;
    Ok(())
}

/// Short plain-text summary.
pub fn summary(report: &DetectionReport) -> String {
    let mut out = String::new();
    let c = &report.confusion;
    out.push_str(&format!("method: {}\n", report.method));
    out.push_str(&format!("models: {}\n", report.models.len()));
    out.push_str(&format!("significant pairs: {}\n", report.correlation.significant_pairs()));
    out.push_str(&format!("confusion: TP={} FP={} TN={} FN={}\n", c.tp, c.fp, c.tn, c.fn_));
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    if let Some(m) = report.metrics {
        out.push_str(&format!(
            "precision: {}  recall: {}  accuracy: {:.3} ± {}\n",
            fmt(m.precision),
            fmt(m.recall),
            m.accuracy,
            fmt(report.ci_halfwidth)
        ));
    }
    out.push_str(&format!("roc_auc: {}\n", fmt(report.roc_auc)));
    out.push_str(&format!("mean silhouette: {:.3}\n", report.clustering.mean_silhouette));
    let conv = match &report.diagnostics {
        Diagnostics::Iva { iterations, converged, .. } | Diagnostics::Parafac2 { iterations, converged, .. } => {
            format!("{iterations} iterations, converged: {converged}")
        }
    };
    out.push_str(&format!("decomposition: {conv}\n"));
    out
}
