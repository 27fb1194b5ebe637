//! Hand-written SVG plots. Every function is pure: the same input gives the
//! same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::global_xai::{contour_levels, contour_segments, default_bandwidth, kde2d, KeywordAnnotation, PcaResult};
use crate::metrics::{ConfusionMatrix, TradeoffPoint};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">
<rect width="100%" height="100%" fill="white"/>
<text x="{:.1}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Linear map from data range to pixel range.
#[derive(Clone, Copy)]
struct Scale {
    d0: f64,
    d1: f64,
    p0: f64,
    p1: f64,
}

impl Scale {
    fn new(d0: f64, d1: f64, p0: f64, p1: f64) -> Self {
        let (d0, d1) = if d1 > d0 { (d0, d1) } else { (d0 - 0.5, d0 + 0.5) };
        Scale { d0, d1, p0, p1 }
    }

    fn at(&self, v: f64) -> f64 {
        self.p0 + (v - self.d0) / (self.d1 - self.d0) * (self.p1 - self.p0)
    }
}

fn axes(out: &mut String, x: Scale, y: Scale, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<g stroke="black" stroke-width="1"><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/></g>"#,
        x.p0, y.p0, x.p1, y.p0, x.p0, y.p0, x.p0, y.p1
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (vx, vy) = (x.d0 + f * (x.d1 - x.d0), y.d0 + f * (y.d1 - y.d0));
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{vx:.3}</text>"#,
            x.at(vx),
            y.p0 + 16.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{vy:.3}</text>"#,
            x.p0 - 6.0,
            y.at(vy) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        (x.p0 + x.p1) / 2.0,
        y.p0 + 36.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (y.p0 + y.p1) / 2.0,
        (y.p0 + y.p1) / 2.0,
        escape(ylabel)
    );
}

/// Abstention against target accuracy, one polyline per task plus the overall curve.
pub fn tradeoff_svg(points: &[TradeoffPoint]) -> String {
    let mut out = String::new();
    header(&mut out, W, H, "Abstention vs target accuracy");
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(p.target), b.max(p.target))
    });
    let (lo, hi) = if points.is_empty() { (0.8, 1.0) } else { (lo, hi) };
    let x = Scale::new(lo, hi, MARGIN, W - MARGIN);
    let y = Scale::new(0.0, 1.0, H - MARGIN, MARGIN);
    axes(&mut out, x, y, "target accuracy", "abstention");
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for p in points {
        series
            .entry("overall".into())
            .or_default()
            .push((p.target, p.abstention));
        for t in &p.tasks {
            series.entry(t.task.clone()).or_default().push((p.target, t.abstention));
        }
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(a, b)| format!("{:.2},{:.2}", x.at(*a), y.at(*b)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for (a, b) in pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                x.at(*a),
                y.at(*b)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            MARGIN + 10.0,
            MARGIN + 16.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Cell intensity in [0, 1]: log10(count + 1) relative to the largest cell.
pub fn heat_intensity(count: u64, max: u64) -> f64 {
    if max == 0 {
        0.0
    } else {
        ((count + 1) as f64).log10() / ((max + 1) as f64).log10()
    }
}

fn heat_color(intensity: f64) -> String {
    // White to dark blue.
    let lerp = |a: f64, b: f64| (a + (b - a) * intensity).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(255.0, 8.0),
        lerp(255.0, 48.0),
        lerp(255.0, 107.0)
    )
}

pub fn confusion_svg(m: &ConfusionMatrix, title: &str) -> String {
    let cell = 36.0;
    let left = 140.0;
    let top = 120.0;
    let w = left + cell * m.columns.len() as f64 + 40.0;
    let h = top + cell * m.labels.len() as f64 + 40.0;
    let mut out = String::new();
    header(&mut out, w.max(320.0), h, title);
    let max = m.counts.iter().flatten().copied().max().unwrap_or(0);
    for (j, c) in m.columns.iter().enumerate() {
        let cx = left + cell * (j as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{:.2}" font-family="sans-serif" font-size="11" transform="rotate(-60 {cx:.2} {:.2})">{}</text>"#,
            top - 6.0,
            top - 6.0,
            escape(c)
        );
    }
    for (i, r) in m.labels.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell / 2.0 + 4.0,
            escape(r)
        );
        for (j, &n) in m.counts[i].iter().enumerate() {
            let x = left + cell * j as f64;
            let t = heat_intensity(n, max);
            let _ = writeln!(
                out,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}" stroke="#cccccc" data-intensity="{t:.6}"/>"##,
                heat_color(t)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle" fill="{}">{n}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                if t > 0.5 { "white" } else { "black" }
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Group label of each scatter point and whether its density contours are drawn.
pub struct ScatterGroup {
    pub label: String,
    pub contour: bool,
}

/// PC1/PC2 scatter coloured by group, KDE contours for groups flagged
/// `contour`, and keyword labels at their (scaled) eigenvector coordinates.
pub fn pca_scatter_svg(
    pca: &PcaResult,
    groups: &[ScatterGroup],
    keywords: &[KeywordAnnotation],
    title: &str,
) -> Result<String> {
    if groups.len() != pca.projections.len() {
        return Err(Error::Shape("one scatter group per projected row required".into()));
    }
    let pts: Vec<(f64, f64)> = pca
        .projections
        .iter()
        .map(|p| (p[0], p.get(1).copied().unwrap_or(0.0)))
        .collect();
    let extent = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let m = 0.1 * (hi - lo).max(1e-9);
        (lo - m, hi + m)
    };
    let (x0, x1) = extent(|p| p.0);
    let (y0, y1) = extent(|p| p.1);
    let x = Scale::new(x0, x1, MARGIN, W - MARGIN);
    let y = Scale::new(y0, y1, H - MARGIN, MARGIN);

    let mut out = String::new();
    header(&mut out, W, H, title);
    axes(&mut out, x, y, "PC1", "PC2");

    let mut labels: Vec<&str> = groups.iter().map(|g| g.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let color_of = |label: &str| PALETTE[labels.iter().position(|l| *l == label).unwrap_or(0) % PALETTE.len()];

    for label in &labels {
        let members: Vec<(f64, f64)> = pts
            .iter()
            .zip(groups)
            .filter(|(_, g)| g.label == *label && g.contour)
            .map(|(p, _)| *p)
            .collect();
        if members.len() < 3 {
            continue;
        }
        let grid = match kde2d(&members, 60, default_bandwidth(&members)) {
            Ok(g) => g,
            Err(_) => continue,
        };
        let color = color_of(label);
        for (li, level) in contour_levels(&grid).into_iter().enumerate() {
            let mut d = String::new();
            for ((ax, ay), (bx, by)) in contour_segments(&grid, level) {
                let _ = write!(d, "M{:.2} {:.2}L{:.2} {:.2}", x.at(ax), y.at(ay), x.at(bx), y.at(by));
            }
            if !d.is_empty() {
                let _ = writeln!(
                    out,
                    r#"<path d="{d}" fill="none" stroke="{color}" stroke-opacity="{:.2}" stroke-width="1"/>"#,
                    0.25 + 0.15 * li as f64
                );
            }
        }
    }
    for (p, g) in pts.iter().zip(groups) {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            x.at(p.0),
            y.at(p.1),
            color_of(&g.label)
        );
    }
    // Loadings live in [-1, 1]; stretch them to the scatter's extent.
    let reach = pts
        .iter()
        .map(|p| p.0.abs().max(p.1.abs()))
        .fold(0.0, f64::max)
        .max(1e-9);
    let lmax = keywords
        .iter()
        .map(|k| k.pc1.abs().max(k.pc2.abs()))
        .fold(0.0, f64::max)
        .max(1e-9);
    let s = 0.8 * reach / lmax;
    for k in keywords {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" font-weight="bold">{}</text>"#,
            x.at(k.pc1 * s),
            y.at(k.pc2 * s),
            escape(&k.word)
        );
    }
    for (i, label) in labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{}">{}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            color_of(label),
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
