//! Minimal SVG renderings built from rectangles, lines and circles.

use std::fmt::Write as _;

use dissipative::numerics::DenseMatrix;

use crate::grid::{Bounds, GridExport};

const SIZE: f64 = 600.0;
/// Cells per axis in rendered heat maps.
const CELLS: usize = 100;
/// Arrows per axis in quiver plots.
const ARROWS: usize = 25;

pub struct Svg {
    bounds: Bounds,
    body: String,
}

impl Svg {
    pub fn new(bounds: Bounds) -> Self {
        Self {
            bounds,
            body: String::new(),
        }
    }

    fn px(&self, x: f64) -> f64 {
        (x - self.bounds.xmin) / (self.bounds.xmax - self.bounds.xmin) * SIZE
    }

    fn py(&self, y: f64) -> f64 {
        (self.bounds.ymax - y) / (self.bounds.ymax - self.bounds.ymin) * SIZE
    }

    fn sx(&self, dx: f64) -> f64 {
        dx / (self.bounds.xmax - self.bounds.xmin) * SIZE
    }

    pub fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, fill: &str) {
        let (a, b) = (self.px(x0), self.py(y1));
        let (w, h) = (self.px(x1) - a, self.py(y0) - b);
        let _ = writeln!(
            self.body,
            r#"<rect x="{a:.2}" y="{b:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    pub fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{stroke}" stroke-width="{width}"/>"#,
            self.px(x0),
            self.py(y0),
            self.px(x1),
            self.py(y1)
        );
    }

    pub fn circle(&mut self, x: f64, y: f64, r_data: f64, fill: &str, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="{fill}" stroke="{stroke}"/>"#,
            self.px(x),
            self.py(y),
            self.sx(r_data)
        );
    }

    pub fn marker(&mut self, x: f64, y: f64, radius_px: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{radius_px}" fill="{fill}"/>"#,
            self.px(x),
            self.py(y)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}

fn gray(level: f64) -> String {
    let v = (255.0 * (1.0 - level.clamp(0.0, 1.0))).round() as u8;
    format!("rgb({v},{v},{v})")
}

/// Coarse heat map of `values` (already scaled to `[0, 1]`).
fn heatmap(svg: &mut Svg, g: &GridExport, values: &[f64]) {
    let n = g.resolution;
    let cells = CELLS.min(n);
    let b = g.bounds;
    let (dx, dy) = ((b.xmax - b.xmin) / cells as f64, (b.ymax - b.ymin) / cells as f64);
    for ci in 0..cells {
        for cj in 0..cells {
            let i = ((ci as f64 + 0.5) / cells as f64 * (n - 1) as f64).round() as usize;
            let j = ((cj as f64 + 0.5) / cells as f64 * (n - 1) as f64).round() as usize;
            let v = values[i * n + j];
            if v > 0.0 {
                let x0 = b.xmin + cj as f64 * dx;
                let y0 = b.ymin + ci as f64 * dy;
                svg.rect(x0, y0, x0 + dx, y0 + dy, &gray(v));
            }
        }
    }
}

/// Quiver plot over a shaded `‖F‖²` map, with optional data points.
pub fn field_svg(g: &GridExport, data: Option<&DenseMatrix>) -> String {
    let mut svg = Svg::new(g.bounds);
    let sq = g.channel("norm_sq").unwrap_or(&[]);
    let max = sq.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let shade: Vec<f64> = sq.iter().map(|v| 0.6 * (v / max).sqrt()).collect();
    heatmap(&mut svg, g, &shade);
    let (fx, fy) = (g.channel("Fx").unwrap_or(&[]), g.channel("Fy").unwrap_or(&[]));
    let n = g.resolution;
    let arrows = ARROWS.min(n);
    let spacing = (g.bounds.xmax - g.bounds.xmin) / arrows as f64;
    let longest = fx
        .iter()
        .zip(fy)
        .map(|(a, b)| a.hypot(*b))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for ai in 0..arrows {
        for aj in 0..arrows {
            let i = ((ai as f64 + 0.5) / arrows as f64 * (n - 1) as f64).round() as usize;
            let j = ((aj as f64 + 0.5) / arrows as f64 * (n - 1) as f64).round() as usize;
            let (x, y) = (g.bounds.x(j, n), g.bounds.y(i, n));
            let k = 0.9 * spacing / longest;
            let (u, v) = (fx[i * n + j] * k, fy[i * n + j] * k);
            svg.line(x, y, x + u, y + v, "steelblue", 1.0);
            svg.marker(x + u, y + v, 1.2, "steelblue");
        }
    }
    if let Some(d) = data {
        scatter(&mut svg, d, "crimson");
    }
    svg.finish()
}

/// Stability region in grey, optionally with the eigenvalue disk and the
/// points `R_θ⁻¹(ĉ)` (yellow) and `R_θ⁻¹(L)` (red).
pub fn stability_svg(g: &GridExport, disk: Option<(f64, f64, f64, f64)>) -> String {
    let mut svg = Svg::new(g.bounds);
    let inside: Vec<f64> = g
        .channel("in_region")
        .unwrap_or(&[])
        .iter()
        .map(|v| 0.35 * v)
        .collect();
    heatmap(&mut svg, g, &inside);
    let b = g.bounds;
    svg.line(b.xmin, 0.0, b.xmax, 0.0, "black", 0.5);
    svg.line(0.0, b.ymin, 0.0, b.ymax, "black", 0.5);
    if let Some((c, r, center_point, lip_point)) = disk {
        svg.circle(c, 0.0, r, "none", "black");
        svg.marker(center_point, 0.0, 4.0, "gold");
        svg.marker(lip_point, 0.0, 4.0, "red");
    }
    svg.finish()
}

/// Point cloud over optional reference data.
pub fn points_svg(bounds: Bounds, points: &DenseMatrix, reference: Option<&DenseMatrix>) -> String {
    let mut svg = Svg::new(bounds);
    if let Some(r) = reference {
        scatter(&mut svg, r, "lightgray");
    }
    scatter(&mut svg, points, "black");
    svg.finish()
}

fn scatter(svg: &mut Svg, pts: &DenseMatrix, fill: &str) {
    if pts.cols() < 2 {
        return;
    }
    for p in 0..pts.rows() {
        svg.marker(pts.get(p, 0), pts.get(p, 1), 2.0, fill);
    }
}
