//! Figures and tables: prediction overlays, metric bar charts and merged
//! metric tables in Markdown, CSV and JSON.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::metrics::MetricReport;

/// Semantic class colours; class 0 is never painted.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

const CONTOUR: [u8; 3] = [255, 225, 25];

/// RGB8 raster of a `[3, H, W]` image in `[0, 1]`.
pub fn to_rgb8(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.dim(1), image.dim(2));
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Image with semantic classes blended in at `alpha` and instance contours
/// drawn on top. Returns RGB8.
pub fn overlay(rgb: &[u8], semantic: &[u8], instances: &[u32], h: usize, w: usize, alpha: f64) -> Vec<u8> {
    let mut out = rgb.to_vec();
    for i in 0..h * w {
        let k = semantic[i] as usize;
        if k == 0 {
            continue;
        }
        let col = PALETTE[(k - 1) % (PALETTE.len() - 1) + 1];
        for c in 0..3 {
            let v = (1.0 - alpha) * out[3 * i + c] as f64 + alpha * col[c] as f64;
            out[3 * i + c] = v.round() as u8;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let id = instances[y * w + x];
            if id == 0 {
                continue;
            }
            let edge = (y == 0 || instances[(y - 1) * w + x] != id)
                || (y + 1 == h || instances[(y + 1) * w + x] != id)
                || (x == 0 || instances[y * w + x - 1] != id)
                || (x + 1 == w || instances[y * w + x + 1] != id);
            if edge {
                out[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&CONTOUR);
            }
        }
    }
    out
}

/// Places equally sized RGB8 panels side by side with a `gap` pixel white
/// margin. Returns `(pixels, width)`.
pub fn hstack(panels: &[Vec<u8>], h: usize, w: usize, gap: usize) -> (Vec<u8>, usize) {
    let n = panels.len();
    let total = n * w + n.saturating_sub(1) * gap;
    let mut out = vec![255u8; 3 * h * total];
    for (k, p) in panels.iter().enumerate() {
        let x0 = k * (w + gap);
        for y in 0..h {
            let dst = 3 * (y * total + x0);
            out[dst..dst + 3 * w].copy_from_slice(&p[3 * y * w..3 * (y + 1) * w]);
        }
    }
    (out, total)
}

/// One row of a merged metric table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub dice: f64,
    pub miou: f64,
    pub hd: Option<f64>,
    pub f1: f64,
    pub aji: f64,
    pub pq_semantic: f64,
    pub pq_instance: f64,
    pub mean_pq: f64,
}

impl TableRow {
    pub fn from_report(name: impl Into<String>, r: &MetricReport) -> Self {
        Self {
            name: name.into(),
            dice: r.mean_dice,
            miou: r.mean_miou,
            hd: r.mean_hd,
            f1: r.mean_f1,
            aji: r.binary_aji,
            pq_semantic: r.mean_pq_semantic,
            pq_instance: r.mean_pq_instance,
            mean_pq: r.mean_pq,
        }
    }

    /// Bounded metrics drawn as bars.
    fn bars(&self) -> [(&'static str, f64); 6] {
        [
            ("Dice", self.dice),
            ("mIoU", self.miou),
            ("F1", self.f1),
            ("AJI", self.aji),
            ("PQ sem", self.pq_semantic),
            ("PQ ins", self.pq_instance),
        ]
    }
}

const HEADER: [&str; 9] = ["run", "dice", "miou", "hd", "f1", "aji", "pq_semantic", "pq_instance", "mean_pq"];

fn cells(r: &TableRow) -> Vec<String> {
    let f = |v: f64| format!("{v:.4}");
    vec![
        r.name.clone(),
        f(r.dice),
        f(r.miou),
        r.hd.map_or_else(|| "n/a".into(), |v| format!("{v:.2}")),
        f(r.f1),
        f(r.aji),
        f(r.pq_semantic),
        f(r.pq_instance),
        f(r.mean_pq),
    ]
}

pub fn table_markdown(rows: &[TableRow]) -> String {
    let mut s = format!("| {} |\n", HEADER.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(HEADER.len()));
    for r in rows {
        let _ = writeln!(s, "| {} |", cells(r).join(" | "));
    }
    s
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = format!("{}\n", HEADER.join(","));
    for r in rows {
        let mut c = cells(r);
        if c[0].contains([',', '"']) {
            c[0] = format!("\"{}\"", c[0].replace('"', "\"\""));
        }
        if r.hd.is_none() {
            c[3].clear();
        }
        let _ = writeln!(s, "{}", c.join(","));
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart, one group per metric and one bar per run.
pub fn metric_bars_svg(rows: &[TableRow]) -> String {
    let (plot_h, bar_w, pad) = (240.0, 14.0, 18.0);
    let groups = 6;
    let n = rows.len().max(1) as f64;
    let group_w = n * bar_w + pad;
    let (left, top) = (40.0, 20.0);
    let width = left + groups as f64 * group_w + 20.0;
    let legend_h = 18.0 * rows.len() as f64;
    let height = top + plot_h + 40.0 + legend_h;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, width - 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y + 4.0);
    }
    for g in 0..groups {
        let x0 = left + g as f64 * group_w + pad / 2.0;
        for (k, r) in rows.iter().enumerate() {
            let (_, v) = r.bars()[g];
            let bh = plot_h * v.clamp(0.0, 1.0);
            let c = PALETTE[k % (PALETTE.len() - 1) + 1];
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{bar_w}" height="{bh}" fill="rgb({},{},{})"><title>{}: {v:.4}</title></rect>"#,
                x0 + k as f64 * bar_w,
                top + plot_h - bh,
                c[0],
                c[1],
                c[2],
                escape(&r.name)
            );
        }
        let label = rows.first().map_or(["Dice", "mIoU", "F1", "AJI", "PQ sem", "PQ ins"][g], |r| r.bars()[g].0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#, x0 + n * bar_w / 2.0, top + plot_h + 16.0);
    }
    for (k, r) in rows.iter().enumerate() {
        let y = top + plot_h + 34.0 + 18.0 * k as f64;
        let c = PALETTE[k % (PALETTE.len() - 1) + 1];
        let _ = writeln!(s, r#"<rect x="{left}" y="{}" width="12" height="12" fill="rgb({},{},{})"/>"#, y - 10.0, c[0], c[1], c[2]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, left + 18.0, escape(&r.name));
    }
    s.push_str("</svg>\n");
    s
}
