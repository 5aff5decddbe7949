//! Plain SVG dumps of the two layouts, for eyeballing results without the UI.

use std::fmt::Write;

use datapath_core::layout::{EulerLayout, LayerView};

const UNIT: f64 = 60.0;
const ROW: f64 = 70.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Rows of the segmented DAG; groups are shaded, each dot sits on a
/// horizontal axis inside its box.
pub fn layer_view(view: &LayerView) -> String {
    let width = view.segments.line_width * UNIT + 20.0;
    let height = view.segments.rows.len() as f64 * ROW + 20.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="9">"#
    );
    for (r, row) in view.segments.rows.iter().enumerate() {
        let y = 10.0 + r as f64 * ROW;
        for placed in row {
            let Some(node) = view.visible.iter().find(|v| v.node == placed.node) else {
                continue;
            };
            let x = 10.0 + placed.x * UNIT;
            let w = placed.width * UNIT - 6.0;
            let fill = if node.is_group { "#e8eef7" } else { "#ffffff" };
            let _ = writeln!(
                out,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="50" rx="4" fill="{fill}" stroke="#4a5a70"/>"##
            );
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 3.0, y + 12.0, escape(&node.path));
            let axis = y + 35.0;
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{axis:.2}" x2="{:.2}" y2="{axis:.2}" stroke="#999"/>"##,
                x + 4.0,
                x + w - 4.0
            );
            for d in &node.dots {
                let cx = x + 4.0 + d.x * (w - 8.0);
                let _ = writeln!(
                    out,
                    r##"<circle cx="{cx:.2}" cy="{axis:.2}" r="2.5" fill="#c0392b"><title>{} {:.4}</title></circle>"##,
                    escape(&d.layer),
                    d.x
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Euler cells as outlined boxes, clusters as filled boxes labelled with their
/// glyph count.
pub fn euler(layout: &EulerLayout, colors: &[Vec<f64>]) -> String {
    let scale = 8.0;
    let (w, h) = (layout.canvas.w * scale, layout.canvas.h * scale);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let max = colors.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for (cell, cell_colors) in layout.cells.iter().zip(colors) {
        for (cluster, &v) in cell.clusters.iter().zip(cell_colors) {
            let r = cluster.rect;
            let t = if max > 0.0 { v / max } else { 0.0 };
            let (red, green) = if t < 0.0 {
                (255.0, 255.0 * (1.0 + t))
            } else {
                (255.0 * (1.0 - t), 255.0)
            };
            let _ = writeln!(
                out,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({:.0},{:.0},200)" stroke="#fff"/>"##,
                r.x * scale,
                r.y * scale,
                r.w * scale,
                r.h * scale,
                red,
                green
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                r.x * scale + 3.0,
                r.y * scale + 12.0,
                "●".repeat(cluster.glyphs)
            );
        }
        let r = cell.rect;
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#222" stroke-width="2"><title>{}</title></rect>"##,
            r.x * scale,
            r.y * scale,
            r.w * scale,
            r.h * scale,
            escape(&cell.signature_names.join(" & "))
        );
    }
    out.push_str("</svg>\n");
    out
}
