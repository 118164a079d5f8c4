//! Minimal static SVG: heatmap, band and scatter primitives.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 400.0;
const MARGIN: f64 = 40.0;

const CLASS_COLORS: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    out.push('\n');
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for (x, anchor) in [(f.x0, "start"), (f.x1, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{x:.2}</text>"#,
            f.px(x),
            H - MARGIN + 14.0
        );
    }
    for y in [f.y0, f.y1] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{y:.2}</text>"#,
            MARGIN - 4.0,
            f.py(y) + 3.0
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Grey-scale map from `[lo, 1]` to dark..light.
fn shade(v: f64, lo: f64) -> String {
    let t = ((v - lo) / (1.0 - lo)).clamp(0.0, 1.0);
    let g = (40.0 + 215.0 * t).round() as u8;
    format!("#{g:02x}{g:02x}{g:02x}")
}

/// Max-probability heatmap with the training points on top.
///
/// `conf[(j, i)]` is the value at `(xs[i], ys[j])`; `points` are `(x, y, class)`.
pub fn confidence_heatmap(
    title: &str,
    xs: &[f64],
    ys: &[f64],
    conf: impl Fn(usize, usize) -> f64,
    n_classes: usize,
    points: &[(f64, f64, usize)],
) -> String {
    let f = Frame {
        x0: xs[0],
        x1: xs[xs.len() - 1],
        y0: ys[0],
        y1: ys[ys.len() - 1],
    };
    let mut out = String::new();
    header(&mut out, title);
    let cw = (W - 2.0 * MARGIN) / xs.len() as f64;
    let ch = (H - 2.0 * MARGIN) / ys.len() as f64;
    let lo = 1.0 / n_classes.max(1) as f64;
    out.push_str("<g shape-rendering=\"crispEdges\">\n");
    for j in 0..ys.len() {
        for i in 0..xs.len() {
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                MARGIN + i as f64 * cw,
                H - MARGIN - (j + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05,
                shade(conf(j, i), lo)
            );
        }
    }
    out.push_str("</g>\n");
    scatter(&mut out, &f, points);
    axes(&mut out, &f);
    out.push_str("</svg>\n");
    out
}

fn scatter(out: &mut String, f: &Frame, points: &[(f64, f64, usize)]) {
    for &(x, y, c) in points {
        if !(f.x0..=f.x1).contains(&x) || !(f.y0.min(f.y1)..=f.y0.max(f.y1)).contains(&y) {
            continue;
        }
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" stroke="black" stroke-width="0.4"/>"#,
            f.px(x),
            f.py(y),
            CLASS_COLORS[c % CLASS_COLORS.len()]
        );
    }
}

/// Predictive mean with a `mean +- 2 std` band and the training points.
pub fn predictive_band(
    title: &str,
    xs: &[f64],
    mean: &[f64],
    std: &[f64],
    points: &[(f64, f64)],
) -> String {
    let lo = mean.iter().zip(std).map(|(m, s)| m - 2.0 * s);
    let hi = mean.iter().zip(std).map(|(m, s)| m + 2.0 * s);
    let y0 = lo
        .clone()
        .chain(points.iter().map(|p| p.1))
        .fold(f64::INFINITY, f64::min);
    let y1 = hi
        .clone()
        .chain(points.iter().map(|p| p.1))
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.05 * (y1 - y0).max(1e-6);
    let f = Frame {
        x0: xs[0],
        x1: xs[xs.len() - 1],
        y0: y0 - pad,
        y1: y1 + pad,
    };
    let mut out = String::new();
    header(&mut out, title);
    let mut poly = String::new();
    for (x, y) in xs.iter().zip(hi) {
        let _ = write!(poly, "{:.2},{:.2} ", f.px(*x), f.py(y));
    }
    for (x, y) in xs.iter().zip(lo).rev() {
        let _ = write!(poly, "{:.2},{:.2} ", f.px(*x), f.py(y));
    }
    let _ = writeln!(
        out,
        r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>"##,
        poly.trim_end()
    );
    let mut line = String::new();
    for (x, y) in xs.iter().zip(mean) {
        let _ = write!(line, "{:.2},{:.2} ", f.px(*x), f.py(*y));
    }
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#08519c" stroke-width="1.5"/>"##,
        line.trim_end()
    );
    let pts: Vec<(f64, f64, usize)> = points.iter().map(|&(x, y)| (x, y, 0)).collect();
    scatter(&mut out, &f, &pts);
    axes(&mut out, &f);
    out.push_str("</svg>\n");
    out
}
