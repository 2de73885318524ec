//! Report rendering: deterministic JSON, CSV with 9-significant-digit
//! numerics, and markdown tables shaped like the comparison tables this kind
//! of evaluation is usually reported in (planning metrics at 2.5/3.5/4.5 s
//! plus a transmission-cost column).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{ReportDoc, RunRecord};
use crate::metrics::{EvalReport, PLANNING_HORIZONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!(
                "unknown report format {other}; expected csv|markdown|json"
            ))),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
            ReportFormat::Json => "json",
        }
    }
}

/// Nine significant digits, the precision contract for CSV round-trips.
pub fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Flattened numeric view of a report; used for CSV columns and the
/// round-trip test.
pub fn flatten_report(r: &EvalReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (k, v) in &r.ap_per_class {
        out.push((format!("ap.{k}"), *v));
    }
    out.push(("det_recall".into(), r.det_recall));
    out.push(("mota".into(), r.mota));
    out.push(("id_switches".into(), r.id_switches));
    out.push(("iou_lane".into(), r.iou_lane));
    out.push(("iou_crosswalk".into(), r.iou_crosswalk));
    out.push(("iou_n".into(), r.iou_n));
    out.push(("iou_f".into(), r.iou_f));
    for h in PLANNING_HORIZONS {
        let key = format!("{h}");
        if let Some(v) = r.l2_at.get(&key) {
            out.push((format!("l2.{key}"), *v));
        }
        if let Some(v) = r.collision_rate_at.get(&key) {
            out.push((format!("collision_rate.{key}"), *v));
        }
        if let Some(v) = r.offroad_rate_at.get(&key) {
            out.push((format!("offroad_rate.{key}"), *v));
        }
    }
    out.push(("l2_avg".into(), r.l2_avg));
    out.push(("collision_rate_avg".into(), r.collision_rate_avg));
    out.push(("offroad_rate_avg".into(), r.offroad_rate_avg));
    out.push(("avg_bps".into(), r.avg_bps));
    out
}

pub fn render(doc: &ReportDoc, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(doc)?),
        ReportFormat::Csv => Ok(render_csv(doc)),
        ReportFormat::Markdown => Ok(render_markdown(doc)),
    }
}

fn render_csv(doc: &ReportDoc) -> String {
    // Column union over records, insertion-ordered by the first record that
    // carries each column.
    let mut columns: Vec<String> = Vec::new();
    let flats: Vec<Vec<(String, f64)>> = doc
        .records
        .iter()
        .map(|r| flatten_report(&r.mean))
        .collect();
    for flat in &flats {
        for (k, _) in flat {
            if !columns.iter().any(|c| c == k) {
                columns.push(k.clone());
            }
        }
    }
    let mut out = String::new();
    out.push_str("label,axis,axis_value,variant");
    for c in &columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (rec, flat) in doc.records.iter().zip(flats.iter()) {
        out.push_str(&rec.label);
        out.push(',');
        out.push_str(rec.axis.as_deref().unwrap_or(""));
        out.push(',');
        if let Some(v) = rec.axis_value {
            out.push_str(&fmt9(v));
        }
        out.push(',');
        out.push_str(rec.variant.as_deref().unwrap_or(""));
        for c in &columns {
            out.push(',');
            if let Some((_, v)) = flat.iter().find(|(k, _)| k == c) {
                out.push_str(&fmt9(*v));
            }
        }
        out.push('\n');
    }
    out
}

fn fmt_cell(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 {
        format!("{v:.3e}")
    } else {
        format!("{v:.3}")
    }
}

fn planning_row(rec: &RunRecord) -> String {
    let m = &rec.mean;
    let horizon = |map: &std::collections::BTreeMap<String, f64>, h: f64| {
        map.get(&format!("{h}")).copied().unwrap_or(0.0)
    };
    let mut cells = vec![rec.label.clone()];
    for h in PLANNING_HORIZONS {
        cells.push(fmt_cell(horizon(&m.l2_at, h)));
    }
    cells.push(fmt_cell(m.l2_avg));
    for h in PLANNING_HORIZONS {
        cells.push(fmt_cell(100.0 * horizon(&m.collision_rate_at, h)));
    }
    cells.push(fmt_cell(100.0 * m.collision_rate_avg));
    for h in PLANNING_HORIZONS {
        cells.push(fmt_cell(100.0 * horizon(&m.offroad_rate_at, h)));
    }
    cells.push(fmt_cell(100.0 * m.offroad_rate_avg));
    cells.push(fmt_cell(m.avg_bps));
    format!("| {} |", cells.join(" | "))
}

fn perception_row(rec: &RunRecord) -> String {
    let m = &rec.mean;
    let ap_car = m.ap_per_class.get("car").copied().unwrap_or(0.0);
    let cells = vec![
        rec.label.clone(),
        fmt_cell(ap_car),
        fmt_cell(m.det_recall),
        fmt_cell(m.mota),
        fmt_cell(m.id_switches),
        fmt_cell(100.0 * m.iou_lane),
        fmt_cell(100.0 * m.iou_crosswalk),
        fmt_cell(100.0 * m.iou_n),
        fmt_cell(100.0 * m.iou_f),
        fmt_cell(m.avg_bps),
    ];
    format!("| {} |", cells.join(" | "))
}

fn render_markdown(doc: &ReportDoc) -> String {
    let mut out = String::new();
    out.push_str("# Evaluation report\n\n");
    if let Some(axis) = &doc.axis {
        out.push_str(&format!("Sweep axis: `{axis}`\n\n"));
    }
    out.push_str("## Planning\n\n");
    out.push_str("| Run | L2 2.5s (m) | L2 3.5s | L2 4.5s | L2 Avg | Col 2.5s (%) | Col 3.5s | Col 4.5s | Col Avg | Off-Road 2.5s (%) | Off-Road 3.5s | Off-Road 4.5s | Off-Road Avg | BPS |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for rec in &doc.records {
        out.push_str(&planning_row(rec));
        out.push('\n');
    }
    out.push_str("\n## Perception / mapping / occupancy\n\n");
    out.push_str("| Run | AP car | Recall | MOTA | IDSW | IoU-Lane (%) | IoU-Crosswalk (%) | IoU-n (%) | IoU-f (%) | BPS |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for rec in &doc.records {
        out.push_str(&perception_row(rec));
        out.push('\n');
    }
    out
}

/// Renders and writes `report.<ext>` into the directory; returns the path.
pub fn write_report(doc: &ReportDoc, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    let content = render(doc, format)?;
    let path = dir.join(format!("report.{}", format.extension()));
    std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}
