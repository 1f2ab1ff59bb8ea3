//! Minimal SVG output: line charts and top-down scene plots.

use std::fmt::Write;

use nalgebra::Vector2;

use crate::envsim::OccupancyGrid;

pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

/// One named polyline of `(x, y)` points.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

/// Line chart with axes, ticks, markers and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 170.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
        y1 = y1.max(p.1);
    }
    if !x0.is_finite() {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let y0 = 0.0;
    let y1 = if y1 <= y0 { 1.0 } else { y1 * 1.1 };
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, (ml + w - mr) / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<g stroke="black"><line x1="{ml}" y1="{}" x2="{}" y2="{}"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}"/></g>"#,
        h - mb,
        w - mr,
        h - mb,
        h - mb
    );
    for t in nice_ticks(x0, x1, 6) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="black"/><text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"##,
            h - mb,
            h - mb + 5.0,
            h - mb + 18.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(y0, y1, 6) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"##,
            ml,
            w - mr,
            ml - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ml + w - mr) / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-name="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            escape(&ser.name),
            path.join(" ")
        );
        for p in ser.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(p.0), sy(p.1));
        }
        let ly = mt + 10.0 + 20.0 * i as f64;
        let lx = w - mr + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(t: f64) -> String {
    let r = (t * 1e6).round() / 1e6;
    format!("{r}")
}

/// A path drawn over the scene.
#[derive(Clone, Debug)]
pub struct ScenePath {
    pub name: String,
    pub color: String,
    pub points: Vec<Vector2<f64>>,
    pub dashed: bool,
}

/// Top-down plot of the occupancy grid with paths, start and goal. World
/// coordinates map to SVG units with `y` flipped; one meter is `scale` px.
pub fn scene(grid: &OccupancyGrid, paths: &[ScenePath], start: Option<Vector2<f64>>, goal: Option<Vector2<f64>>) -> String {
    let scale = (800.0 / grid.world_width().max(grid.world_height())).max(1.0);
    let (w, h) = (grid.world_width() * scale, grid.world_height() * scale);
    let px = |p: &Vector2<f64>| ((p.x - grid.origin.x) * scale, h - (p.y - grid.origin.y) * scale);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {w:.2} {h:.2}" font-family="sans-serif" font-size="12">"#,
        w,
        h + 20.0 * paths.len() as f64
    );
    let _ = writeln!(s, r#"<rect width="{w:.2}" height="{h:.2}" fill="white"/>"#);
    let cell = grid.resolution * scale;
    s.push_str(r##"<g class="obstacles" fill="#444">"##);
    s.push('\n');
    for j in 0..grid.height {
        let mut i = 0;
        while i < grid.width {
            if !grid.get(i, j) {
                i += 1;
                continue;
            }
            let start_i = i;
            while i < grid.width && grid.get(i, j) {
                i += 1;
            }
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
                start_i as f64 * cell,
                h - (j + 1) as f64 * cell,
                (i - start_i) as f64 * cell,
                cell
            );
        }
    }
    s.push_str("</g>\n");
    for (k, p) in paths.iter().enumerate() {
        let pts: Vec<String> = p
            .points
            .iter()
            .map(|q| {
                let (x, y) = px(q);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let dash = if p.dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline class="path" data-name="{}" points="{}" fill="none" stroke="{}" stroke-width="2"{dash}/>"#,
            escape(&p.name),
            pts.join(" "),
            escape(&p.color)
        );
        let _ = writeln!(
            s,
            r#"<text x="8" y="{:.1}" fill="{}">{}</text>"#,
            h + 15.0 + 20.0 * k as f64,
            escape(&p.color),
            escape(&p.name)
        );
    }
    if let Some(st) = start {
        let (x, y) = px(&st);
        let _ = writeln!(s, r##"<circle class="start" cx="{x:.2}" cy="{y:.2}" r="5" fill="#2ca02c"/>"##);
    }
    if let Some(g) = goal {
        let (x, y) = px(&g);
        let _ = writeln!(s, r##"<circle class="goal" cx="{x:.2}" cy="{y:.2}" r="6" fill="none" stroke="#d62728" stroke-width="2"/>"##);
    }
    s.push_str("</svg>\n");
    s
}
