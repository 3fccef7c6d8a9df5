//! Per-scene SVG overlays: one panel per camera with the 2D annotations,
//! the initial projections and the final projections.

use std::fmt::Write;

use crate::geometry::{project_box, Box2D, Box3D, Camera};
use crate::scenegen::Scene;

const PANEL_WIDTH: f64 = 400.0;
const COLUMNS: usize = 3;
const GAP: f64 = 8.0;
const LEGEND_HEIGHT: f64 = 28.0;

pub const GT_STROKE: &str = "#1a9641";
pub const INITIAL_STROKE: &str = "#d7191c";
pub const FINAL_STROKE: &str = "#2c7bb6";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn rect(out: &mut String, b: &Box2D, cam: &Camera, scale: f64, stroke: &str, dashed: bool) {
    let x0 = b.x_min().max(0.0);
    let y0 = b.y_min().max(0.0);
    let x1 = b.x_max().min(cam.width as f64);
    let y1 = b.y_max().min(cam.height as f64);
    if x1 <= x0 || y1 <= y0 {
        return;
    }
    let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
    let _ = writeln!(
        out,
        "    <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"{dash}/>",
        x0 * scale,
        y0 * scale,
        (x1 - x0) * scale,
        (y1 - y0) * scale
    );
}

/// Renders `scene` with its annotations (green), `initial` boxes (red,
/// dashed) and `final_boxes` (blue).
pub fn scene_overlay(scene: &Scene, initial: &[Box3D], final_boxes: &[Box3D]) -> String {
    let rows = scene.cameras.len().div_ceil(COLUMNS).max(1);
    let panel_height = scene
        .cameras
        .iter()
        .map(|c| c.height as f64 * PANEL_WIDTH / c.width as f64)
        .fold(0.0, f64::max);
    let width = COLUMNS as f64 * (PANEL_WIDTH + GAP) + GAP;
    let height = rows as f64 * (panel_height + GAP) + GAP + LEGEND_HEIGHT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">"
    );
    let _ = writeln!(s, "  <title>scene {}</title>", escape(&scene.id));
    let _ = writeln!(s, "  <rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>");
    for (ci, cam) in scene.cameras.iter().enumerate() {
        let scale = PANEL_WIDTH / cam.width as f64;
        let ox = GAP + (ci % COLUMNS) as f64 * (PANEL_WIDTH + GAP);
        let oy = GAP + (ci / COLUMNS) as f64 * (panel_height + GAP);
        let _ = writeln!(s, "  <g id=\"{}\" transform=\"translate({ox:.2},{oy:.2})\">", escape(&cam.id));
        let _ = writeln!(
            s,
            "    <rect width=\"{:.2}\" height=\"{:.2}\" fill=\"#f4f4f4\" stroke=\"#888888\"/>",
            PANEL_WIDTH,
            cam.height as f64 * scale
        );
        let _ = writeln!(
            s,
            "    <text x=\"4\" y=\"12\" font-family=\"monospace\" font-size=\"10\">{}</text>",
            escape(&cam.id)
        );
        for a in &scene.ann2d[ci] {
            rect(&mut s, &a.bbox, cam, scale, GT_STROKE, false);
        }
        for b in initial {
            if let Ok(p) = project_box(cam, b) {
                rect(&mut s, &p, cam, scale, INITIAL_STROKE, true);
            }
        }
        for b in final_boxes {
            if let Ok(p) = project_box(cam, b) {
                rect(&mut s, &p, cam, scale, FINAL_STROKE, false);
            }
        }
        let _ = writeln!(s, "  </g>");
    }
    let ly = height - LEGEND_HEIGHT / 2.0;
    for (k, (label, stroke, dashed)) in [
        ("annotation", GT_STROKE, false),
        ("initial", INITIAL_STROKE, true),
        ("final", FINAL_STROKE, false),
    ]
    .into_iter()
    .enumerate()
    {
        let x = GAP + k as f64 * 120.0;
        let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
        let _ = writeln!(
            s,
            "  <line x1=\"{x:.0}\" y1=\"{ly:.0}\" x2=\"{:.0}\" y2=\"{ly:.0}\" stroke=\"{stroke}\" stroke-width=\"2\"{dash}/>",
            x + 24.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.0}\" y=\"{:.0}\" font-family=\"monospace\" font-size=\"11\">{label}</text>",
            x + 30.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
