//! Minimal SVG charts for reports. No font or image backend required.

use std::fmt::Write;

use crate::eval::{RocCurve, TradeoffPoint};

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;

/// A polyline series with a stroke color.
pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(f64::MIN_POSITIVE);
        MARGIN + (x - self.x.0) / span * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(f64::MIN_POSITIVE);
        H - MARGIN - (y - self.y.0) / span * (H - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str, f: &Frame) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (x0, x1, y0, y1) = (f.px(f.x.0), f.px(f.x.1), f.py(f.y.0), f.py(f.y.1));
    let _ = write!(
        out,
        r#"<rect x="{x0:.1}" y="{y1:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = write!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.px(xv), y0 + 14.0, tick(xv));
        let _ = write!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 4.0, f.py(yv) + 4.0, tick(yv));
    }
    let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
    let _ = write!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn polyline(out: &mut String, f: &Frame, pts: &[(f64, f64)], color: &str, dash: bool) {
    let coords: Vec<String> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect();
    let dash = if dash { r#" stroke-dasharray="4 3""# } else { "" };
    let _ = write!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, coords.join(" "));
}

fn legend(out: &mut String, series: &[(&str, &str)]) {
    for (i, (label, color)) in series.iter().enumerate() {
        let y = MARGIN + 12.0 + 14.0 * i as f64;
        let x = W - MARGIN - 110.0;
        let _ = write!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, x + 16.0);
        let _ = write!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 20.0, y + 4.0, escape(label));
    }
}

/// Line chart over explicit axis ranges.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64), series: &[Series]) -> String {
    let f = Frame { x, y };
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, &f);
    for s in series {
        polyline(&mut out, &f, &s.points, s.color, false);
    }
    legend(&mut out, &series.iter().map(|s| (s.label, s.color)).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// ROC curve with the chance diagonal.
pub fn roc_svg(title: &str, roc: &RocCurve, auc: Option<f64>) -> String {
    let f = Frame { x: (0.0, 1.0), y: (0.0, 1.0) };
    let mut out = String::new();
    header(&mut out, title, "false positive rate", "true positive rate", &f);
    polyline(&mut out, &f, &[(0.0, 0.0), (1.0, 1.0)], "#999", true);
    polyline(&mut out, &f, &roc.points, "#1f77b4", false);
    let label = auc.map_or("ROC".to_string(), |a| format!("AUC {a:.3}"));
    legend(&mut out, &[(&label, "#1f77b4")]);
    out.push_str("</svg>\n");
    out
}

/// FAR and FRR against the threshold.
pub fn tradeoff_svg(title: &str, curve: &[TradeoffPoint]) -> String {
    let finite: Vec<&TradeoffPoint> = curve.iter().filter(|p| p.threshold.is_finite()).collect();
    let lo = finite.iter().map(|p| p.threshold).fold(f64::INFINITY, f64::min);
    let hi = finite.iter().map(|p| p.threshold).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let far = finite.iter().map(|p| (p.threshold, p.far)).collect();
    let frr = finite.iter().map(|p| (p.threshold, p.frr)).collect();
    line_chart(
        title,
        "threshold",
        "rate",
        (lo, hi),
        (0.0, 1.0),
        &[
            Series { label: "FAR", color: "#d62728", points: far },
            Series { label: "FRR", color: "#2ca02c", points: frr },
        ],
    )
}

/// Overlaid histograms of authorized and unauthorized scores with a
/// vertical threshold marker.
pub fn score_histogram_svg(title: &str, scores: &[f64], labels: &[bool], threshold: f64, bins: usize) -> String {
    let bins = bins.max(1);
    let finite = scores.iter().copied().filter(|s| s.is_finite());
    let lo = finite.clone().fold(threshold, f64::min);
    let hi = finite.fold(threshold, f64::max);
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![[0usize; 2]; bins];
    for (&s, &y) in scores.iter().zip(labels) {
        if s.is_finite() {
            let b = (((s - lo) / width) as usize).min(bins - 1);
            counts[b][y as usize] += 1;
        }
    }
    let peak = counts.iter().flat_map(|c| c.iter()).copied().max().unwrap_or(1).max(1) as f64;
    let f = Frame { x: (lo, hi), y: (0.0, peak) };
    let mut out = String::new();
    header(&mut out, title, "score", "count", &f);
    for (b, c) in counts.iter().enumerate() {
        for (class, color) in [(0usize, "#d62728"), (1, "#1f77b4")] {
            if c[class] == 0 {
                continue;
            }
            let x0 = f.px(lo + b as f64 * width);
            let x1 = f.px(lo + (b + 1) as f64 * width);
            let top = f.py(c[class] as f64);
            let _ = write!(
                out,
                r#"<rect x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.45"/>"#,
                (x1 - x0).max(0.5),
                f.py(0.0) - top
            );
        }
    }
    polyline(&mut out, &f, &[(threshold, 0.0), (threshold, peak)], "black", true);
    legend(&mut out, &[("unauthorized", "#d62728"), ("authorized", "#1f77b4")]);
    out.push_str("</svg>\n");
    out
}
