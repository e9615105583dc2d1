//! Stick-figure SVG frames.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::Normalizer;
use crate::error::{contract, io_err, Result};
use crate::sign::SignSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderStyle {
    /// Pixels per coordinate unit.
    pub scale: f64,
    pub width: f64,
    pub height: f64,
    pub joint_radius: f64,
    /// Bone list as joint index pairs.
    pub edges: Vec<(usize, usize)>,
}

/// Binary-tree skeleton: joint `j` hangs off joint `(j - 1) / 2`.
pub fn default_edges(joints: usize) -> Vec<(usize, usize)> {
    (1..joints).map(|j| (j, (j - 1) / 2)).collect()
}

impl RenderStyle {
    pub fn for_joints(joints: usize) -> Self {
        RenderStyle {
            scale: 40.0,
            width: 400.0,
            height: 400.0,
            joint_radius: 3.0,
            edges: default_edges(joints),
        }
    }

    /// Pixel position of a coordinate pair; y grows downwards in SVG.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (self.width / 2.0 + self.scale * x, self.height / 2.0 - self.scale * y)
    }
}

/// One SVG document for frame `t` of an already de-normalized sequence.
pub fn frame_svg(s: &SignSequence, t: usize, style: &RenderStyle) -> String {
    let coords = s.coords();
    let frame = s.frame(t);
    let pos = |j: usize| {
        let x = frame[j * coords];
        let y = if coords > 1 { frame[j * coords + 1] } else { 0.0 };
        style.to_pixel(x, y)
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = style.width,
        h = style.height
    );
    let _ = writeln!(out, r#"<g stroke="black" stroke-width="2">"#);
    for &(a, b) in &style.edges {
        let ((x1, y1), (x2, y2)) = (pos(a), pos(b));
        let _ = writeln!(out, r#"<line x1="{x1:.4}" y1="{y1:.4}" x2="{x2:.4}" y2="{y2:.4}"/>"#);
    }
    let _ = writeln!(out, "</g>");
    for j in 0..s.joints() {
        let (x, y) = pos(j);
        let _ = writeln!(
            out,
            r#"<circle id="j{j}" cx="{x:.4}" cy="{y:.4}" r="{}" fill="crimson"/>"#,
            style.joint_radius
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `frame_0000.svg`, `frame_0001.svg`, ... for a normalized sequence.
pub fn render_svg_frames(
    s: &SignSequence,
    norm: &Normalizer,
    style: &RenderStyle,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if let Some(&(a, b)) = style.edges.iter().find(|&&(a, b)| a >= s.joints() || b >= s.joints()) {
        return Err(contract(format!("edge ({a}, {b}) names a joint outside 0..{}", s.joints())));
    }
    let raw = norm.invert(s);
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    (0..raw.frames())
        .map(|t| {
            let path = out_dir.join(format!("frame_{t:04}.svg"));
            std::fs::write(&path, frame_svg(&raw, t, style)).map_err(io_err(&path))?;
            Ok(path)
        })
        .collect()
}
