//! Diagnostic SVG: front and side orthographic views of one skeleton.

use std::fmt::Write;

use posedepth::fbi::{BoneStatus, FbiMatrix};
use posedepth::skeleton::{Pose3D, SkeletonTopology};

const PANEL: f64 = 300.0;
/// Half-width of each panel in mm.
const EXTENT: f64 = 1100.0;
const BONE: &str = "#4a5568";
const FORWARD: &str = "#e53e3e";
const REFERENCE: &str = "#a0aec0";

/// Renders `pose` (and optionally a faint reference pose) in two panels:
/// x-y on the left, z-y on the right. Bones labelled forward in `fbi` are tinted.
pub fn skeleton_svg(
    pose: &Pose3D,
    reference: Option<&Pose3D>,
    fbi: &FbiMatrix,
    topo: &SkeletonTopology,
    stamp: &str,
) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = 2.0 * PANEL,
        h = PANEL
    );
    let _ = writeln!(svg, "<!-- {stamp} -->");
    let _ = writeln!(
        svg,
        r##"<rect width="{w}" height="{h}" fill="#ffffff"/><line x1="{PANEL}" y1="0" x2="{PANEL}" y2="{h}" stroke="#e2e8f0"/>"##,
        w = 2.0 * PANEL,
        h = PANEL
    );
    let forward: Vec<(usize, usize)> = topo
        .fbi_bones()
        .iter()
        .zip(fbi.statuses())
        .filter(|(_, s)| **s == BoneStatus::Forward)
        .map(|(b, _)| *b)
        .collect();
    for (panel, depth_axis) in [(0.0, 0usize), (PANEL, 2usize)] {
        let to_px = |p: [f64; 3]| {
            let half = PANEL / 2.0;
            (panel + half + p[depth_axis] / EXTENT * half, half + p[1] / EXTENT * half)
        };
        if let Some(r) = reference {
            draw(&mut svg, r, topo, &to_px, &[], REFERENCE, 1.0);
        }
        draw(&mut svg, pose, topo, &to_px, &forward, BONE, 2.0);
    }
    let _ = writeln!(
        svg,
        r##"<text x="6" y="14" font-size="11" fill="#718096">front</text><text x="{}" y="14" font-size="11" fill="#718096">side</text>"##,
        PANEL + 6.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn draw(
    svg: &mut String,
    pose: &Pose3D,
    topo: &SkeletonTopology,
    to_px: &dyn Fn([f64; 3]) -> (f64, f64),
    forward: &[(usize, usize)],
    color: &str,
    width: f64,
) {
    for (child, parent) in topo.parents().iter().enumerate() {
        let Some(p) = *parent else { continue };
        let tinted = forward.iter().any(|&(a, b)| (a, b) == (p, child) || (a, b) == (child, p));
        let (x1, y1) = to_px(pose.joints[p]);
        let (x2, y2) = to_px(pose.joints[child]);
        let _ = writeln!(
            svg,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{}" stroke-width="{width}"/>"#,
            if tinted { FORWARD } else { color }
        );
    }
    for j in &pose.joints {
        let (x, y) = to_px(*j);
        let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{:.1}" fill="{color}"/>"#, width + 1.0);
    }
}
