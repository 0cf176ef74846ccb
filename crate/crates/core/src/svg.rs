//! Minimal SVG charts for reports: line plots, bar charts with error bars
//! and maze trajectory traces. Output is plain text with fixed float
//! formatting, so identical inputs give identical files.

use std::fmt::Write as _;

use crate::envs::{Cell, MazeSpec};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

/// Maps data ranges onto the plot area.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Frame { x: pad(x), y: pad(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
        let _ = writeln!(
            out,
            r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" stroke="black" fill="none"/>"#
        );
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let yv = self.y.0 + t * (self.y.1 - self.y.0);
            let xv = self.x.0 + t * (self.x.1 - self.x.0);
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
                x0 - 6.0,
                self.py(yv) + 4.0
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                self.px(xv),
                y0 + 18.0,
                trim(xv)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 12.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(y_label)
        );
    }
}

fn trim(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter().copied());
    let mut frame = Frame::new(range(pts().map(|p| p.0)), range(pts().map(|p| p.1)));
    if !frame.x.0.is_finite() {
        frame = Frame::new((0.0, 1.0), (0.0, 1.0));
    }
    let mut out = String::new();
    header(&mut out, W, H);
    frame.axes(&mut out, title, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            d.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 16.0 * i as f64,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Bars with interval whiskers on a `[0, max]` axis.
pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let top = range(bars.iter().flat_map(|b| [b.value, b.upper])).1.max(1e-9);
    let n = bars.len().max(1) as f64;
    let frame = Frame::new((0.0, n), (0.0, top));
    let mut out = String::new();
    header(&mut out, W, H);
    let (x0, y0) = (MARGIN, H - MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.1},{MARGIN:.1} L{x0:.1},{y0:.1} L{:.1},{y0:.1}" stroke="black" fill="none"/>"#,
        W - MARGIN
    );
    for k in 0..=4 {
        let yv = top * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            x0 - 6.0,
            frame.py(yv) + 4.0
        );
    }
    let slot = (W - 2.0 * MARGIN) / n;
    for (i, b) in bars.iter().enumerate() {
        let cx = MARGIN + slot * (i as f64 + 0.5);
        let (top_y, bw) = (frame.py(b.value), slot * 0.6);
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{top_y:.1}" width="{bw:.1}" height="{:.1}" fill="{}"/>"#,
            cx - bw / 2.0,
            (y0 - top_y).max(0.0),
            PALETTE[i % PALETTE.len()]
        );
        let (yl, yu) = (frame.py(b.lower), frame.py(b.upper));
        let _ = writeln!(
            out,
            r#"<path d="M{cx:.1},{yl:.1} L{cx:.1},{yu:.1} M{:.1},{yl:.1} L{:.1},{yl:.1} M{:.1},{yu:.1} L{:.1},{yu:.1}" stroke="black"/>"#,
            cx - 6.0,
            cx + 6.0,
            cx - 6.0,
            cx + 6.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            y0 + 18.0,
            escape(&b.label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    out.push_str("</svg>\n");
    out
}

/// The maze with walls shaded and each trace drawn through cell centres.
pub fn maze_traces(spec: &MazeSpec, traces: &[Vec<Cell>]) -> String {
    let cell = 32.0;
    let (w, h) = (spec.width as f64 * cell, spec.height as f64 * cell);
    let mut out = String::new();
    header(&mut out, w, h);
    for y in 0..spec.height {
        for x in 0..spec.width {
            if spec.is_wall(x, y) {
                let _ = writeln!(
                    out,
                    r##"<rect x="{:.0}" y="{:.0}" width="{cell:.0}" height="{cell:.0}" fill="#444"/>"##,
                    x as f64 * cell,
                    y as f64 * cell
                );
            }
        }
    }
    let centre = |c: Cell| ((c.x as f64 + 0.5) * cell, (c.y as f64 + 0.5) * cell);
    for (i, tr) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = tr
            .iter()
            .map(|&c| {
                let (x, y) = centre(c);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" stroke="{color}" stroke-width="3" fill="none" opacity="0.8"/>"#,
            pts.join(" ")
        );
        if let (Some(&s), Some(&g)) = (tr.first(), tr.last()) {
            let (sx, sy) = centre(s);
            let (gx, gy) = centre(g);
            let _ = writeln!(out, r#"<circle cx="{sx:.1}" cy="{sy:.1}" r="5" fill="{color}"/>"#);
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#,
                gx - 5.0,
                gy - 5.0
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::LayoutId;

    #[test]
    fn charts_are_well_formed_and_deterministic() {
        let s = vec![Series {
            name: "a<b".into(),
            points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)],
        }];
        let a = line_plot("t", "x", "y", &s);
        assert_eq!(a, line_plot("t", "x", "y", &s));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("a&lt;b"));
        assert!(line_plot("empty", "x", "y", &[]).contains("</svg>"));
        let bars = [Bar {
            label: "ocbc".into(),
            value: 0.5,
            lower: 0.4,
            upper: 0.6,
        }];
        assert_eq!(bar_chart("s", "rate", &bars).matches("<rect").count(), 2);
        let spec = MazeSpec::builtin(LayoutId::Umaze).unwrap();
        let trace = vec![spec.free_cells().to_vec()];
        assert!(maze_traces(&spec, &trace).contains("<polyline"));
    }
}
