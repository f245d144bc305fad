//! Dependency-free SVG scatter plots of run snapshots.
//!
//! Each snapshot shows four point classes: targets, base data, the current
//! batch, and the codebook (drawn as crosses). The coordinate frame is
//! fixed across a run's snapshots so motion is visually comparable.

use std::fmt::Write as _;

use ndarray::ArrayView2;

use crate::harness::TraceLog;

/// Colors and geometry of a snapshot plot.
#[derive(Debug, Clone)]
pub struct PlotStyle {
    pub width: u32,
    pub height: u32,
    pub point_radius: f64,
    /// Target distribution color (purple).
    pub target_color: String,
    /// Base data color (green).
    pub base_color: String,
    /// Current batch color (blue).
    pub batch_color: String,
    /// Codebook cross color (red).
    pub code_color: String,
}

impl Default for PlotStyle {
    fn default() -> Self {
        Self {
            width: 640,
            height: 640,
            point_radius: 2.0,
            target_color: "#9467bd".into(),
            base_color: "#2ca02c".into(),
            batch_color: "#1f77b4".into(),
            code_color: "#d62728".into(),
        }
    }
}

/// Axis-aligned data bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl Bounds {
    /// Bounds covering every row of every given matrix (first two columns).
    pub fn covering<'a>(clouds: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Bounds {
        let mut b = Bounds {
            min_x: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            min_y: f64::INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for cloud in clouds {
            for row in cloud.rows() {
                if row.len() < 2 {
                    continue;
                }
                b.min_x = b.min_x.min(row[0]);
                b.max_x = b.max_x.max(row[0]);
                b.min_y = b.min_y.min(row[1]);
                b.max_y = b.max_y.max(row[1]);
            }
        }
        if !b.min_x.is_finite() {
            b = Bounds { min_x: -1.0, max_x: 1.0, min_y: -1.0, max_y: 1.0 };
        }
        b
    }

    /// Grows each side by `frac` of the span (floored to a minimum span so
    /// degenerate clouds stay visible).
    pub fn padded(mut self, frac: f64) -> Bounds {
        let span_x = (self.max_x - self.min_x).max(1e-6);
        let span_y = (self.max_y - self.min_y).max(1e-6);
        self.min_x -= frac * span_x;
        self.max_x += frac * span_x;
        self.min_y -= frac * span_y;
        self.max_y += frac * span_y;
        self
    }
}

struct Frame<'a> {
    bounds: &'a Bounds,
    style: &'a PlotStyle,
}

impl Frame<'_> {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let margin = 10.0;
        let w = self.style.width as f64 - 2.0 * margin;
        let h = self.style.height as f64 - 2.0 * margin;
        let sx = margin + (x - self.bounds.min_x) / (self.bounds.max_x - self.bounds.min_x) * w;
        // SVG y grows downward.
        let sy = margin + (self.bounds.max_y - y) / (self.bounds.max_y - self.bounds.min_y) * h;
        (sx, sy)
    }
}

fn write_dots(out: &mut String, frame: &Frame<'_>, cloud: ArrayView2<'_, f64>, color: &str, r: f64) {
    for row in cloud.rows() {
        let (x, y) = frame.map(row[0], row[1]);
        let _ = writeln!(
            out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{color}" fill-opacity="0.55"/>"#
        );
    }
}

fn write_crosses(out: &mut String, frame: &Frame<'_>, cloud: ArrayView2<'_, f64>, color: &str, arm: f64) {
    for row in cloud.rows() {
        let (x, y) = frame.map(row[0], row[1]);
        let _ = writeln!(
            out,
            r#"<path d="M {:.2} {:.2} L {:.2} {:.2} M {:.2} {:.2} L {:.2} {:.2}" stroke="{color}" stroke-width="2"/>"#,
            x - arm,
            y - arm,
            x + arm,
            y + arm,
            x - arm,
            y + arm,
            x + arm,
            y - arm,
        );
    }
}

/// Renders one snapshot: targets (purple), base (green), batch (blue),
/// codebook crosses (red).
pub fn render_snapshot(
    base: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    batch: ArrayView2<'_, f64>,
    codebook: ArrayView2<'_, f64>,
    bounds: &Bounds,
    style: &PlotStyle,
    title: &str,
) -> String {
    let frame = Frame { bounds, style };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        style.width, style.height, style.width, style.height
    );
    let _ = writeln!(
        out,
        r#"<rect width="100%" height="100%" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="12" y="20" font-family="monospace" font-size="14">{title}</text>"#
    );
    write_dots(&mut out, &frame, targets, &style.target_color, style.point_radius);
    write_dots(&mut out, &frame, base, &style.base_color, style.point_radius);
    write_dots(&mut out, &frame, batch, &style.batch_color, style.point_radius);
    write_crosses(&mut out, &frame, codebook, &style.code_color, 3.0 * style.point_radius);
    out.push_str("</svg>\n");
    out
}

/// Renders every stored snapshot of a trace in one shared coordinate frame.
///
/// Returns `(step, svg)` pairs in snapshot order, the initial state first.
pub fn render_trace_snapshots(trace: &TraceLog, style: &PlotStyle) -> Vec<(usize, String)> {
    let mut clouds = vec![trace.base.view(), trace.targets.view()];
    for snap in &trace.snapshots {
        clouds.push(snap.batch_points.view());
        clouds.push(snap.codebook.view());
    }
    let bounds = Bounds::covering(clouds).padded(0.05);
    trace
        .snapshots
        .iter()
        .map(|snap| {
            let title = format!(
                "{} / {} / step {}",
                trace.process_name, trace.rule_name, snap.step
            );
            let svg = render_snapshot(
                trace.base.view(),
                trace.targets.view(),
                snap.batch_points.view(),
                snap.codebook.view(),
                &bounds,
                style,
                &title,
            );
            (snap.step, svg)
        })
        .collect()
}
