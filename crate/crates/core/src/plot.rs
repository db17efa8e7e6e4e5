//! Static SVG figures from sample and norm CSV files.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::eval::NormRow;
use crate::report::{parse_norms_csv, parse_samples_csv, SampleRow};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame { x0: -1.0, x1: 1.0, y0: -1.0, y1: 1.0 };
        }
        let pad = |lo: f64, hi: f64| {
            let p = if hi > lo { 0.05 * (hi - lo) } else { 1.0 };
            (lo - p, hi + p)
        };
        let (x0, x1) = pad(f.x0, f.x1);
        let (y0, y1) = pad(f.y0, f.y1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(out: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(out, r#"<g class="axes" stroke="black" stroke-width="1">"#);
    let _ = writeln!(out, r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/>"#);
    let _ = writeln!(out, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{b}"/>"#);
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g class="ticks" font-size="10">"#);
    for i in 0..=4 {
        let fx = frame.x0 + (frame.x1 - frame.x0) * i as f64 / 4.0;
        let fy = frame.y0 + (frame.y1 - frame.y0) * i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.2}</text>"#, frame.px(fx), b + 14.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.2}</text>"#, l - 4.0, frame.py(fy) + 3.0);
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, WIDTH / 2.0, HEIGHT - 8.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, labels: &[String]) {
    let _ = writeln!(out, r#"<g class="legend" font-size="10">"#);
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN + 12.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<rect x="{}" y="{}" width="8" height="8" fill="{color}"/>"#, WIDTH - MARGIN + 4.0, y - 7.0);
        let _ = writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, WIDTH - MARGIN + 14.0, escape(label));
    }
    let _ = writeln!(out, "</g>");
}

/// Scatter plot with one group per label, in order of first appearance.
pub fn scatter_svg(rows: &[SampleRow]) -> String {
    let mut labels: Vec<String> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    let frame = Frame::fit(rows.iter().map(|r| (r.x as f64, r.y as f64)));
    let mut out = String::new();
    open(&mut out, "samples", &frame, "x", "y");
    for (i, label) in labels.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<g class="series" data-label="{}" fill="{color}" fill-opacity="0.6">"#, escape(label));
        for r in rows.iter().filter(|r| &r.label == label) {
            if r.x.is_finite() && r.y.is_finite() {
                let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#, frame.px(r.x as f64), frame.py(r.y as f64));
            }
        }
        let _ = writeln!(out, "</g>");
    }
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

/// Mean norm against probe step count, one polyline per prompt class.
/// Rows sharing a step count are averaged.
pub fn norms_svg(rows: &[NormRow]) -> String {
    let mut steps: Vec<usize> = rows.iter().map(|r| r.steps).collect();
    steps.sort_unstable();
    steps.dedup();
    let series: [(&str, fn(&NormRow) -> f32); 3] =
        [("erased", |r| r.mean_erased), ("neutral", |r| r.mean_neutral), ("retained", |r| r.mean_retained)];
    let lines: Vec<(&str, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(name, get)| {
            let pts = steps
                .iter()
                .map(|&s| {
                    let vals: Vec<f64> = rows.iter().filter(|r| r.steps == s).map(|r| get(r) as f64).collect();
                    (s as f64, vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            (*name, pts)
        })
        .collect();
    let frame = Frame::fit(lines.iter().flat_map(|(_, pts)| pts.iter().copied()));
    let mut out = String::new();
    open(&mut out, "divergence norms", &frame, "probe steps", "mean norm");
    for (i, (name, pts)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-label="{name}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
    }
    legend(&mut out, &lines.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Picks the figure type from the CSV header.
pub fn render_csv(text: &str) -> Result<String> {
    let header = text.lines().next().unwrap_or("");
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.contains(&"mean_erased") {
        Ok(norms_svg(&parse_norms_csv(text)?))
    } else if cols == ["label", "x", "y"] {
        Ok(scatter_svg(&parse_samples_csv(text)?))
    } else {
        Err(Error::Parse { line: 1, msg: format!("unrecognized CSV header {header:?}") })
    }
}

pub fn emit_plot(input: impl AsRef<Path>, output: impl AsRef<Path>) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    write_atomic(output.as_ref(), render_csv(&text)?.as_bytes())
}
