//! Side-by-side SVG overlays: ground truth on the left, predictions on the
//! right, stroke color per class, dashed red over mispredicted primitives.

use std::fmt::Write;

use crate::model::{Drawing, Geometry};

const PALETTE: [&str; 10] = [
    "#9e9e9e", "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6",
    "#bcf60c", "#008080",
];

pub fn class_color(label: u32) -> &'static str {
    PALETTE[label as usize % PALETTE.len()]
}

fn emit_geometry(out: &mut String, g: &Geometry, size: f64, color: &str, extra: &str) {
    // SVG y grows downward; drawings grow upward
    let fy = |y: f64| size - y;
    match g {
        Geometry::Line { x1, y1, x2, y2 } => {
            let _ = write!(
                out,
                r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{color}"{extra}/>"#,
                x1,
                fy(*y1),
                x2,
                fy(*y2)
            );
        }
        Geometry::Circle { cx, cy, r } => {
            let _ = write!(
                out,
                r#"<circle cx="{:.3}" cy="{:.3}" r="{:.3}" fill="none" stroke="{color}"{extra}/>"#,
                cx,
                fy(*cy),
                r
            );
        }
        Geometry::Ellipse { cx, cy, a, b, rot } => {
            let _ = write!(
                out,
                r#"<ellipse cx="{:.3}" cy="{:.3}" rx="{:.3}" ry="{:.3}" transform="rotate({:.3} {:.3} {:.3})" fill="none" stroke="{color}"{extra}/>"#,
                cx,
                fy(*cy),
                a,
                b,
                -rot.to_degrees(),
                cx,
                fy(*cy)
            );
        }
        Geometry::Arc {
            cx,
            cy,
            r,
            start,
            sweep,
        } => {
            let (sx, sy) = (cx + r * start.cos(), cy + r * start.sin());
            let end = start + sweep;
            let (ex, ey) = (cx + r * end.cos(), cy + r * end.sin());
            let large = if sweep.abs() > std::f64::consts::PI { 1 } else { 0 };
            // positive sweep is counter-clockwise in drawing space, which is
            // clockwise (flag 0... flag 1) after the y flip
            let flag = if *sweep > 0.0 { 0 } else { 1 };
            let _ = write!(
                out,
                r#"<path d="M {:.3} {:.3} A {:.3} {:.3} 0 {large} {flag} {:.3} {:.3}" fill="none" stroke="{color}"{extra}/>"#,
                sx,
                fy(sy),
                r,
                r,
                ex,
                fy(ey)
            );
        }
        Geometry::Text {
            xmin,
            ymin,
            xmax,
            ymax,
            ..
        } => {
            let _ = write!(
                out,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="{color}"{extra}/>"#,
                xmin,
                fy(*ymax),
                xmax - xmin,
                ymax - ymin
            );
        }
    }
    out.push('\n');
}

/// Ground truth and predictions side by side. `pred_labels` must align with
/// the tile's primitives; primitives whose predicted label disagrees with
/// ground truth get a dashed red overlay on the right panel.
pub fn render_overlay(tile: &Drawing, pred_labels: &[u32]) -> String {
    let size = if tile.meta.tile_size > 0.0 {
        tile.meta.tile_size
    } else {
        14.0
    };
    let sw = size / 400.0; // stroke width that scales with the tile
    let mut out = String::new();
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {:.3} {:.3}" stroke-width="{sw:.4}">"#,
        size * 2.0 + 1.0,
        size
    );
    out.push('\n');

    out.push_str("<g>\n");
    for p in &tile.primitives {
        emit_geometry(&mut out, &p.geometry, size, class_color(p.label), "");
    }
    out.push_str("</g>\n");

    let _ = write!(out, r#"<g transform="translate({:.3} 0)">"#, size + 1.0);
    out.push('\n');
    for (p, &pl) in tile.primitives.iter().zip(pred_labels) {
        emit_geometry(&mut out, &p.geometry, size, class_color(pl), "");
        if pl != p.label {
            emit_geometry(
                &mut out,
                &p.geometry,
                size,
                "#ff0000",
                r#" stroke-dasharray="0.1 0.1""#,
            );
        }
    }
    out.push_str("</g>\n</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_tile, SynthConfig};

    #[test]
    fn overlay_structure() {
        let tile = generate_tile(&SynthConfig::default(), 0);
        let gt: Vec<u32> = tile.primitives.iter().map(|p| p.label).collect();
        let svg = render_overlay(&tile, &gt);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // perfect predictions produce no mismatch overlays
        assert!(!svg.contains("stroke-dasharray"));
        assert_eq!(svg.matches("<g").count(), 2);
    }

    #[test]
    fn mismatches_get_dashed_overlay() {
        let tile = generate_tile(&SynthConfig::default(), 1);
        let mut pred: Vec<u32> = tile.primitives.iter().map(|p| p.label).collect();
        pred[0] = if pred[0] == 1 { 2 } else { 1 };
        pred[1] = if pred[1] == 1 { 2 } else { 1 };
        let svg = render_overlay(&tile, &pred);
        assert_eq!(svg.matches("stroke-dasharray").count(), 2);
    }

    #[test]
    fn deterministic_output() {
        let tile = generate_tile(&SynthConfig::default(), 2);
        let gt: Vec<u32> = tile.primitives.iter().map(|p| p.label).collect();
        assert_eq!(render_overlay(&tile, &gt), render_overlay(&tile, &gt));
    }
}
