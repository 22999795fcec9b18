//! Static SVG rendering for trade-off curves and selection trajectories.
//!
//! Output is plain text with fixed two-decimal coordinates, so identical
//! inputs give byte-identical files.

use std::fmt::Write;

use crate::synth::ExperimentReport;
use crate::tradeoff::TradeoffCurve;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 60.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        Self {
            x: padded_range(xs),
            y: padded_range(ys),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>
<line x1="{MARGIN}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{:.2}" stroke="black"/>
<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>
<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>
"#,
        WIDTH / 2.0,
        escape(title),
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN,
        HEIGHT - MARGIN,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(x_label),
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label),
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x.0 + t * (frame.x.1 - frame.x.0);
        let yv = frame.y.0 + t * (frame.y.1 - frame.y.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            frame.px(xv),
            HEIGHT - MARGIN + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            MARGIN - 6.0,
            frame.py(yv) + 4.0,
            tick(yv)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn polyline(out: &mut String, frame: &Frame, pts: &[(f64, f64)], stroke: &str) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> = pts
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#,
        coords.join(" ")
    );
}

/// Δ against T(Δ); points with infinite T are left out.
pub fn curve_svg(curve: &TradeoffCurve) -> String {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter(|p| p.t_value.is_finite())
        .map(|p| (p.delta, p.t_value))
        .collect();
    let frame = Frame::fit(pts.iter().map(|p| p.0), pts.iter().map(|p| p.1));
    let mut out = String::new();
    header(
        &mut out,
        "risk-discrepancy trade-off",
        &frame,
        "risk budget Δ",
        "T(Δ)",
    );
    polyline(&mut out, &frame, &pts, "#1f77b4");
    for &(x, y) in &pts {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##,
            frame.px(x),
            frame.py(y)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Per-trial (ce, mmd) trajectories with the two globally chosen checkpoints marked.
pub fn trajectories_svg(report: &ExperimentReport) -> String {
    let all = || report.trials.iter().flat_map(|t| t.audit.iter());
    let frame = Frame::fit(all().map(|r| r.ce), all().map(|r| r.mmd));
    let mut out = String::new();
    header(
        &mut out,
        "checkpoint trajectories",
        &frame,
        "validation cross-entropy",
        "validation MMD",
    );
    for trial in &report.trials {
        let pts: Vec<(f64, f64)> = trial.audit.iter().map(|r| (r.ce, r.mmd)).collect();
        polyline(&mut out, &frame, &pts, "#bbbbbb");
    }
    let locate = |run_id: &str, step: u64| {
        report
            .trials
            .iter()
            .filter(|t| t.run_id == run_id)
            .flat_map(|t| t.audit.iter())
            .find(|r| r.step == step)
            .map(|r| (frame.px(r.ce), frame.py(r.mmd)))
    };
    if let Some((x, y)) = locate(&report.traditional.run_id, report.traditional.step) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="none" stroke="#d62728" stroke-width="2"/>"##,
            x - 5.0,
            y - 5.0
        );
    }
    if let Some((x, y)) = locate(&report.ours.run_id, report.ours.step) {
        let _ = writeln!(
            out,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="#2ca02c"/>"##
        );
    }
    let lx = WIDTH - MARGIN - 150.0;
    let _ = write!(
        out,
        r##"<circle cx="{:.2}" cy="{:.2}" r="5" fill="#2ca02c"/>
<text x="{:.2}" y="{:.2}">combined criterion</text>
<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="none" stroke="#d62728" stroke-width="2"/>
<text x="{:.2}" y="{:.2}">best accuracy</text>
"##,
        lx,
        MARGIN,
        lx + 12.0,
        MARGIN + 4.0,
        lx - 5.0,
        MARGIN + 13.0,
        lx + 12.0,
        MARGIN + 22.0,
    );
    out.push_str("</svg>\n");
    out
}
