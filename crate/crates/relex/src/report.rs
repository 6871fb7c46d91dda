//! Report artifacts: precision-recall tables as CSV, standalone SVG plots,
//! attention heat maps, and the metrics summary file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{AttentionRow, Metrics, PRCurve, PRPoint};

pub fn write_pr_csv(path: &Path, curve: &PRCurve) -> Result<()> {
    let mut out = String::from("recall,precision\n");
    for pt in &curve.points {
        let _ = writeln!(out, "{},{}", pt.recall, pt.precision);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pr_csv(path: &Path) -> Result<Vec<PRPoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "recall,precision" {
                return Err(Error::Eval(format!(
                    "{}: expected a recall,precision header",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.splitn(2, ',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.trim().parse().ok()).ok_or_else(|| {
                Error::Eval(format!("{} line {}: bad row {line:?}", path.display(), i + 1))
            })
        };
        let recall = parse(cells.next())?;
        let precision = parse(cells.next())?;
        points.push(PRPoint { recall, precision });
    }
    Ok(points)
}

/// Metrics summary written next to the curve, stamped with the manifest hash.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub total_positives: usize,
    pub predictions: usize,
    pub p_at: Vec<(usize, f64)>,
    pub top_relations: Vec<(String, usize)>,
    pub config_hash: String,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub data_hashes: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn new(
        metrics: &Metrics,
        distribution: &[(String, usize)],
        config_hash: &str,
    ) -> MetricsReport {
        MetricsReport {
            auc: metrics.auc,
            total_positives: metrics.total_positives,
            predictions: metrics.predictions,
            p_at: metrics.p_at.clone(),
            top_relations: distribution.to_vec(),
            config_hash: config_hash.to_string(),
            data_hashes: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 56.0;

fn x_px(recall: f64) -> f64 {
    LEFT + recall * (W - LEFT - RIGHT)
}

fn y_px(precision: f64) -> f64 {
    TOP + (1.0 - precision) * (H - TOP - BOTTOM)
}

/// Renders one or more named curves into a self-contained SVG document.
pub fn pr_svg(curves: &[(String, Vec<PRPoint>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);

    // grid and tick labels every 0.2
    for i in 0..=5 {
        let v = i as f64 * 0.2;
        let x = x_px(v);
        let y = y_px(v);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="#dddddd"/>"##,
            y_px(1.0),
            y_px(0.0)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#dddddd"/>"##,
            x_px(0.0),
            x_px(1.0)
        );
        let _ = writeln!(
            s,
            r##"<text x="{x:.1}" y="{}" font-size="12" text-anchor="middle" fill="#333333">{v:.1}</text>"##,
            y_px(0.0) + 18.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{:.1}" font-size="12" text-anchor="end" fill="#333333">{v:.1}</text>"##,
            x_px(0.0) - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="{:.1}" height="{:.1}" fill="none" stroke="#333333"/>"##,
        x_px(0.0),
        y_px(1.0),
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{}" font-size="14" text-anchor="middle" fill="#111111">Recall</text>"##,
        (x_px(0.0) + x_px(1.0)) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r##"<text x="16" y="{:.1}" font-size="14" text-anchor="middle" fill="#111111" transform="rotate(-90 16 {:.1})">Precision</text>"##,
        (y_px(0.0) + y_px(1.0)) / 2.0,
        (y_px(0.0) + y_px(1.0)) / 2.0
    );

    for (ci, (label, points)) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let mut coords = String::new();
        for pt in points {
            let _ = write!(coords, "{:.2},{:.2} ", x_px(pt.recall), y_px(pt.precision));
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.trim_end()
        );
        let ly = TOP + 16.0 + ci as f64 * 18.0;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            W - RIGHT - 150.0,
            W - RIGHT - 120.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" font-size="12" fill="#111111">{}</text>"##,
            W - RIGHT - 112.0,
            ly + 4.0,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_pr_svg(path: &Path, curves: &[(String, Vec<PRPoint>)]) -> Result<()> {
    fs::write(path, pr_svg(curves)).map_err(|e| Error::io(path, e))
}

/// A one-row heat map of attention mass over input tokens.
pub fn attention_svg(rows: &[AttentionRow]) -> String {
    let cell_w = 64.0;
    let cell_h = 40.0;
    let top = 24.0;
    let width = 16.0 + cell_w * rows.len() as f64;
    let height = top + cell_h + 40.0;
    let max_w = rows.iter().map(|r| r.weight).fold(f64::MIN_POSITIVE, f64::max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(s, r#"<rect width="{width:.0}" height="{height:.0}" fill="white"/>"#);
    for (i, row) in rows.iter().enumerate() {
        let x = 8.0 + i as f64 * cell_w;
        let heat = (row.weight / max_w).clamp(0.0, 1.0);
        let g = (255.0 * (1.0 - heat)).round() as u8;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{top}" width="{cell_w}" height="{cell_h}" fill="rgb(255,{g},{g})" stroke="#999999"/>"##
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" fill="#111111">{}</text>"##,
            x + cell_w / 2.0,
            top + cell_h / 2.0 + 4.0,
            xml_escape(&row.token)
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle" fill="#333333">{:.3}</text>"##,
            x + cell_w / 2.0,
            top + cell_h + 16.0,
            row.weight
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_attention_svg(path: &Path, rows: &[AttentionRow]) -> Result<()> {
    fs::write(path, attention_svg(rows)).map_err(|e| Error::io(path, e))
}

/// Plain-text attention table for terminal output.
pub fn attention_table(rows: &[AttentionRow]) -> String {
    let width = rows.iter().map(|r| r.token.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:>4}  {:<width$}  {}\n", "pos", "token", "weight");
    for row in rows {
        let _ = writeln!(s, "{:>4}  {:<width$}  {:.6}", row.position, row.token, row.weight);
    }
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
