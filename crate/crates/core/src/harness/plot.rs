use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::Example;

pub const WIDTH: f64 = 1200.0;
pub const HEIGHT: f64 = 320.0;
pub const MARGIN: f64 = 10.0;
pub const SIGNAL_COLOR: &str = "#1f77b4";
pub const ATTRIBUTION_COLOR: &str = "#2ca02c";
pub const SHADE_COLOR: &str = "#d62728";

/// Horizontal position of sample `index` (or of the boundary before it).
pub fn sample_x(index: usize, length: usize) -> f64 {
    MARGIN + index as f64 * (WIDTH - 2.0 * MARGIN) / length.max(1) as f64
}

/// Vertical position of a value already normalized to `[0, 1]`.
pub fn level_y(v: f64) -> f64 {
    HEIGHT - MARGIN - v * (HEIGHT - 2.0 * MARGIN)
}

/// Min-max normalization to `[0, 1]`; a constant (or empty) input maps to 0.
pub fn min_max_normalize(values: &[f32]) -> Vec<f64> {
    let finite = values.iter().copied().filter(|v| v.is_finite()).map(f64::from);
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 && v.is_finite() { (v as f64 - lo) / span } else { 0.0 })
        .collect()
}

fn polyline(out: &mut String, class: &str, color: &str, ys: &[f64]) {
    let n = ys.len();
    let _ = write!(out, r#"<polyline class="{class}" fill="none" stroke="{color}" stroke-width="1" points=""#);
    for (i, &v) in ys.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{:.3},{:.3}", sample_x(i, n), level_y(v));
    }
    out.push_str("\"/>\n");
}

/// Renders the SVG text of a signal/attribution overlay.
pub fn render_overlay(example: &Example, attr: &[f32]) -> Result<String> {
    let n = example.signal.len();
    if attr.len() != n {
        return Err(Error::Input(format!("attribution has {} values, signal has {n}", attr.len())));
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, "<title>example {} ({})</title>", example.id, example.label.name());
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let top = level_y(1.0);
    let bottom = level_y(0.0);
    for (start, end) in example.abnormal_intervals() {
        let x0 = sample_x(start, n);
        let x1 = sample_x(end, n);
        let _ = writeln!(
            out,
            r#"<rect class="abnormal" data-start="{start}" data-end="{end}" x="{x0}" y="{top}" width="{}" height="{}" fill="{SHADE_COLOR}" fill-opacity="0.15"/>"#,
            x1 - x0,
            bottom - top
        );
    }
    polyline(&mut out, "signal", SIGNAL_COLOR, &min_max_normalize(&example.signal));
    polyline(&mut out, "attribution", ATTRIBUTION_COLOR, &min_max_normalize(attr));
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn plot_overlay(example: &Example, attr: &[f32], path: &Path) -> Result<()> {
    let svg = render_overlay(example, attr)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
