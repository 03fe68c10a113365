//! Report emission: metrics and curves rendered as `report.json`,
//! `report.csv` and `report.svg`. Output bytes depend only on the input
//! report, so repeated emission is byte-stable.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    /// Scalar metrics in deterministic (sorted) order.
    pub metrics: BTreeMap<String, f64>,
    pub curves: Vec<Curve>,
}

/// Write `report.json`, `report.csv` and `report.svg` under `out_dir`;
/// returns the written paths.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let json_path = out_dir.join("report.json");
    let csv_path = out_dir.join("report.csv");
    let svg_path = out_dir.join("report.svg");
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?)?;
    std::fs::write(&csv_path, render_csv(report))?;
    std::fs::write(&svg_path, render_svg(report))?;
    Ok(vec![json_path, csv_path, svg_path])
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_csv(report: &Report) -> String {
    let mut out = String::from("kind,name,x,y\n");
    for (name, v) in &report.metrics {
        let _ = writeln!(out, "metric,{},,{}", csv_escape(name), v);
    }
    for curve in &report.curves {
        for (x, y) in &curve.points {
            let _ = writeln!(out, "curve,{},{},{}", csv_escape(&curve.name), x, y);
        }
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_svg(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">",
        W, H, W, H
    );
    let _ = writeln!(
        s,
        "  <rect width=\"{}\" height=\"{}\" fill=\"white\"/>",
        W, H
    );
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        xml_escape(&report.title)
    );
    // Axes.
    let (x0, y0) = (MARGIN, H - MARGIN);
    let (x1, y1) = (W - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        x0, y0, x1, y0
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        x0, y0, x0, y1
    );
    let x_label = report
        .curves
        .first()
        .map(|c| c.x_label.clone())
        .unwrap_or_default();
    let y_label = report
        .curves
        .first()
        .map(|c| c.y_label.clone())
        .unwrap_or_default();
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        H - 16.0,
        xml_escape(&x_label)
    );
    let _ = writeln!(
        s,
        "  <text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        xml_escape(&y_label)
    );
    // Data range over all curves.
    let pts: Vec<(f64, f64)> = report
        .curves
        .iter()
        .flat_map(|c| c.points.iter().copied())
        .collect();
    if !pts.is_empty() {
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &pts {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if xmax == xmin {
            xmax = xmin + 1.0;
        }
        if ymax == ymin {
            ymax = ymin + 1.0;
        }
        let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
        let sy = |y: f64| y0 - (y - ymin) / (ymax - ymin) * (y0 - y1);
        // Range tick labels.
        for (v, px, py, anchor) in [
            (xmin, sx(xmin), y0 + 16.0, "middle"),
            (xmax, sx(xmax), y0 + 16.0, "middle"),
            (ymin, x0 - 6.0, sy(ymin) + 4.0, "end"),
            (ymax, x0 - 6.0, sy(ymax) + 4.0, "end"),
        ] {
            let _ = writeln!(
                s,
                "  <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"{}\">{}</text>",
                px, py, anchor, v
            );
        }
        for (ci, curve) in report.curves.iter().enumerate() {
            let color = COLORS[ci % COLORS.len()];
            if curve.points.len() > 1 {
                let path: Vec<String> = curve
                    .points
                    .iter()
                    .map(|&(x, y)| format!("{},{}", sx(x), sy(y)))
                    .collect();
                let _ = writeln!(
                    s,
                    "  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
                    color,
                    path.join(" ")
                );
            }
            for &(x, y) in &curve.points {
                let _ = writeln!(
                    s,
                    "  <circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>",
                    sx(x),
                    sy(y),
                    color
                );
            }
            let _ = writeln!(
                s,
                "  <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{}\">{}</text>",
                x1 - 150.0,
                y1 + 14.0 * ci as f64,
                color,
                xml_escape(&curve.name)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
