//! Static skeleton overlays: predicted and ground-truth poses projected
//! through the sequence camera, one panel per frame.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use posediff_core::io::dataset::{Dataset, Skeleton};
use posediff_core::metrics::per_joint_mpjpe;
use posediff_core::sampler::reproject;
use posediff_core::Tensor;

use crate::pipeline::paired;

const PANEL: f64 = 220.0;
const MARGIN: f64 = 14.0;
const COLUMNS: usize = 4;
const PRED_COLOUR: &str = "#d62728";
const GT_COLOUR: &str = "#1f77b4";

/// Frame index with its projected prediction and ground truth.
type Frame = (usize, Vec<[f64; 2]>, Vec<[f64; 2]>);

fn points(t: &Tensor, f: usize, j: usize) -> Vec<[f64; 2]> {
    t.data()[f * j * 2..(f + 1) * j * 2].chunks(2).map(|p| [p[0], p[1]]).collect()
}

fn skeleton_svg(out: &mut String, pts: &[[f64; 2]], skel: &Skeleton, map: &dyn Fn([f64; 2]) -> [f64; 2], class: &str, colour: &str) {
    let _ = writeln!(out, r#"<g class="skeleton {class}" stroke="{colour}" fill="{colour}">"#);
    for (a, b) in skel.bones() {
        let (p, q) = (map(pts[a]), map(pts[b]));
        let _ = writeln!(
            out,
            r#"<line class="bone" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke-width="2"/>"#,
            p[0], p[1], q[0], q[1]
        );
    }
    for (j, p) in pts.iter().enumerate() {
        let p = map(*p);
        let _ = writeln!(out, r#"<circle class="joint" data-joint="{j}" cx="{:.2}" cy="{:.2}" r="2.5"/>"#, p[0], p[1]);
    }
    out.push_str("</g>\n");
}

fn render_svg(id: &str, frames_total: usize, skel: &Skeleton, frames: &[Frame]) -> String {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in frames.iter().flat_map(|(_, p, g)| p.iter().chain(g)) {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (PANEL - 2.0 * MARGIN) / span;
    let rows = frames_total.div_ceil(COLUMNS).max(1);
    let (w, h) = (PANEL * COLUMNS.min(frames_total.max(1)) as f64, PANEL * rows as f64 + 30.0);

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(id));
    let _ = writeln!(
        out,
        r#"<text x="6" y="18">{}: <tspan fill="{PRED_COLOUR}">prediction</tspan> / <tspan fill="{GT_COLOUR}">ground truth</tspan></text>"#,
        escape(id)
    );
    for i in 0..frames_total {
        let (x0, y0) = ((i % COLUMNS) as f64 * PANEL, (i / COLUMNS) as f64 * PANEL + 30.0);
        let _ = writeln!(out, r#"<g class="frame" data-frame="{i}" transform="translate({x0:.0},{y0:.0})">"#);
        let _ = writeln!(out, r##"<rect width="{PANEL}" height="{PANEL}" fill="none" stroke="#cccccc"/>"##);
        let _ = writeln!(out, r#"<text x="4" y="12">frame {i}</text>"#);
        match frames.iter().find(|f| f.0 == i) {
            Some((_, pred, gt)) => {
                let map = |p: [f64; 2]| [MARGIN + (p[0] - lo[0]) * scale, MARGIN + (p[1] - lo[1]) * scale];
                skeleton_svg(&mut out, gt, skel, &map, "gt", GT_COLOUR);
                skeleton_svg(&mut out, pred, skel, &map, "pred", PRED_COLOUR);
            }
            None => {
                let _ = writeln!(out, r##"<text x="{:.0}" y="{:.0}" text-anchor="middle" fill="#888888">absent</text>"##, PANEL / 2.0, PANEL / 2.0);
            }
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `<id>.svg` and `<id>_per_joint.csv` into `out`.
pub fn plot_sequence(pred: &Tensor, ds: &Dataset, id: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let rec = ds.get(id).ok_or_else(|| anyhow!("sequence {id:?} is not in the dataset"))?;
    let (p, g) = paired(pred, rec)?;
    let cam = rec.camera_or_default();
    let (p2, g2) = (reproject(&p, &cam)?, reproject(&g, &cam)?);
    let j = rec.joints();
    let present: Vec<usize> = (0..rec.frames()).filter(|f| rec.presence[*f]).collect();
    let frames: Vec<Frame> = present.iter().enumerate().map(|(k, &f)| (f, points(&p2, k, j), points(&g2, k, j))).collect();
    let svg = render_svg(id, rec.frames(), &ds.skeleton, &frames);

    let mut csv = String::from("joint,mpjpe_mm\n");
    for (j, v) in per_joint_mpjpe(&p, &g)?.iter().enumerate() {
        let _ = writeln!(csv, "{j},{v:e}");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let svg_path = out.join(format!("{id}.svg"));
    let csv_path = out.join(format!("{id}_per_joint.csv"));
    fs::write(&svg_path, svg).with_context(|| format!("writing {}", svg_path.display()))?;
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    Ok(vec![svg_path, csv_path])
}
