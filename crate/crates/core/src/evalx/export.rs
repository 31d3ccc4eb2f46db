//! CSV renderings of metrics reports.

use std::fs;
use std::path::Path;

use crate::domain::ModalityConfig;
use crate::error::Result;
use crate::evalx::metrics::MetricsReport;

pub const TABLE1_HEADER: [&str; 9] = [
    "Img",
    "BoneSeg",
    "FracLoc",
    "Report",
    "Accuracy",
    "F1",
    "Precision",
    "Recall",
    "AUROC",
];

pub const TABLE2_HEADER: [&str; 4] = ["Encoder", "Accuracy", "F1", "AUROC"];

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn pct_opt(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "nan".into())
}

fn flag(on: bool) -> String {
    if on { "x" } else { "" }.to_string()
}

/// One row of `table1.csv`; metrics are rendered in percent.
pub fn table1_row(cfg: &ModalityConfig, report: &MetricsReport) -> Vec<String> {
    let m = &report.macro_avg;
    vec![
        flag(true),
        flag(cfg.use_segmentation),
        flag(cfg.use_fracture_location),
        flag(cfg.use_report),
        pct(m.accuracy),
        pct(m.f1),
        pct(m.precision),
        pct(m.recall),
        pct_opt(m.auroc),
    ]
}

pub fn write_table1<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a ModalityConfig, &'a MetricsReport)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TABLE1_HEADER)?;
    for (cfg, report) in rows {
        w.write_record(table1_row(cfg, report))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table2<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a MetricsReport)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TABLE2_HEADER)?;
    for (name, r) in rows {
        w.write_record([
            name.to_string(),
            pct(r.macro_avg.accuracy),
            pct(r.macro_avg.f1),
            pct_opt(r.macro_avg.auroc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// File-system safe name for an AO/OTA code, e.g. `23r-M/2.1` -> `23r-M_2.1`.
pub fn code_file_stem(code: &str) -> String {
    code.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-._".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `dir/<class>.csv` with columns `config,fpr,tpr` for every class,
/// one curve per experiment.
pub fn write_roc_csvs<'a>(
    dir: &Path,
    rows: impl IntoIterator<Item = (&'a ModalityConfig, &'a MetricsReport)> + Clone,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let Some((_, first)) = rows.clone().into_iter().next() else {
        return Ok(());
    };
    for (k, class) in first.per_class.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", code_file_stem(&class.code))))?;
        w.write_record(["config", "fpr", "tpr"])?;
        for (cfg, report) in rows.clone() {
            for &(fpr, tpr) in &report.per_class[k].roc {
                w.write_record([cfg.name(), format!("{fpr:.6}"), format!("{tpr:.6}")])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}
