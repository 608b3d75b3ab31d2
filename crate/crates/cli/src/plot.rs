//! Self-contained SVG scatter of a validation metric against forward FLOPs.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use triplane::tasks::parse_log_csv;
use triplane::{Error, Result};

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Run {
    pub label: String,
    pub source: String,
    pub flops: u64,
    pub metric: String,
    /// Best validation value over epochs (lowest for loss and Chamfer).
    pub value: f64,
}

fn lower_is_better(metric: &str) -> bool {
    matches!(metric, "loss" | "chamfer_l2")
}

impl Run {
    /// Reads `metrics.csv` and the `report.json` beside it.
    pub fn load(csv: &Path, metric: Option<&str>) -> Result<Run> {
        let text = std::fs::read_to_string(csv).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", csv.display()))))?;
        let rows = parse_log_csv(&text)?;
        let report_path = csv.with_file_name("report.json");
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(&report_path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", report_path.display()))))?,
        )?;
        let flops = report["flops"]
            .as_u64()
            .ok_or_else(|| Error::Format(format!("{}: missing integer \"flops\"", report_path.display())))?;
        let label = report["label"].as_str().unwrap_or("run").to_string();
        let val: Vec<_> = rows.iter().filter(|r| r.split == "val").collect();
        let metric = match metric {
            Some(m) => m.to_string(),
            None => ["iou", "accuracy"]
                .into_iter()
                .find(|m| val.iter().any(|r| r.metric == *m))
                .ok_or_else(|| Error::Config(format!("{}: no validation iou or accuracy rows", csv.display())))?
                .to_string(),
        };
        let values = val.iter().filter(|r| r.metric == metric).map(|r| r.value);
        let value = if lower_is_better(&metric) {
            values.fold(f64::INFINITY, f64::min)
        } else {
            values.fold(f64::NEG_INFINITY, f64::max)
        };
        if !value.is_finite() {
            return Err(Error::Config(format!("{}: no validation rows for {metric}", csv.display())));
        }
        Ok(Run {
            label,
            source: csv.display().to_string(),
            flops,
            metric,
            value,
        })
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const M: f64 = 60.0;

/// One `<g class="series">` per run; x is log10 GFLOPs.
pub fn scatter(runs: &[Run]) -> String {
    let xs: Vec<f64> = runs.iter().map(|r| (r.flops.max(1) as f64 / 1e9).log10()).collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    x0 = x0.floor();
    x1 = x1.ceil().max(x0 + 1.0);
    let (mut y0, mut y1) = runs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.value), b.max(r.value)));
    if runs.iter().all(|r| !lower_is_better(&r.metric)) && y1 <= 1.0 {
        (y0, y1) = (y0.min(0.0), 1.0);
    }
    if y1 - y0 < 1e-9 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let metric = runs.first().map_or("metric", |r| r.metric.as_str());

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<g class="axes" stroke="black">"#);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}"/>"#, H - M, W - M, H - M);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}"/>"#, H - M);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="ticks" text-anchor="middle">"#);
    for e in (x0 as i32)..=(x1 as i32) {
        let x = px(e as f64);
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="black"/>"#, H - M, H - M + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}">1e{e}</text>"#, H - M + 18.0);
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.1}" x2="{M}" y2="{y:.1}" stroke="black"/>"#, M - 5.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, M - 8.0, y + 4.0);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">forward GFLOPs (log scale)</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(metric)
    );
    for (i, (r, &x)) in runs.iter().zip(&xs).enumerate() {
        let c = COLORS[i % COLORS.len()];
        let (cx, cy) = (px(x), py(r.value));
        let _ = writeln!(s, r#"<g class="series" data-label="{}" fill="{c}">"#, escape(&r.label));
        let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="5"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, cx + 8.0, cy - 6.0, escape(&r.label));
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_escaped_and_series_counted() {
        let runs = vec![
            Run {
                label: "a<b>".into(),
                source: "x".into(),
                flops: 2_000_000_000,
                metric: "iou".into(),
                value: 0.5,
            },
            Run {
                label: "c&d".into(),
                source: "y".into(),
                flops: 30_000_000_000,
                metric: "iou".into(),
                value: 0.7,
            },
        ];
        let svg = scatter(&runs);
        assert_eq!(svg.matches(r#"class="series""#).count(), 2);
        assert!(svg.contains("a&lt;b&gt;") && svg.contains("c&amp;d"));
        assert!(!svg.contains("a<b>"));
    }
}
