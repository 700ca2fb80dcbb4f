//! Minimal deterministic SVG line charts for sweep and benchmark plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Render one chart with shared axes; points are (x, y) pairs per series.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0).max(1e-12) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0).max(1e-12) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    write!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        escape(title)
    )
    .unwrap();
    // axes
    write!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    )
    .unwrap();
    write!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(x_label)
    )
    .unwrap();
    write!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" font-family="sans-serif" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    )
    .unwrap();
    // tick labels at the extremes
    for (v, anchor_x) in [(x0, px(x0)), (x1, px(x1))] {
        write!(
            svg,
            r#"<text x="{anchor_x}" y="{}" text-anchor="middle" font-size="10" font-family="sans-serif">{}</text>"#,
            H - MARGIN + 16.0,
            fmt_num(v)
        )
        .unwrap();
    }
    for (v, anchor_y) in [(y0, py(y0)), (y1, py(y1))] {
        write!(
            svg,
            r#"<text x="{}" y="{anchor_y}" text-anchor="end" font-size="10" font-family="sans-serif">{}</text>"#,
            MARGIN - 6.0,
            fmt_num(v)
        )
        .unwrap();
    }
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|(x, y)| format!("{},{}", px(*x), py(*y))).collect();
        write!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        for (x, y) in &s.points {
            write!(svg, r#"<circle cx="{}" cy="{}" r="3" fill="{color}"/>"#, px(*x), py(*y)).unwrap();
        }
        // legend
        let ly = MARGIN + 18.0 * si as f64;
        write!(
            svg,
            r#"<rect x="{}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}" font-size="11" font-family="sans-serif">{}</text>"#,
            W - MARGIN - 150.0,
            ly,
            W - MARGIN - 132.0,
            ly + 10.0,
            escape(&s.name)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    crate::manifest::write_atomic(path, svg.as_bytes())?;
    Ok(())
}

fn bounds(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn fmt_num(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
