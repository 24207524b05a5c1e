//! Learning curves as static SVG: per-variant mean with a min-max band.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::HarnessError;
use crate::rl::METRICS_HEADER;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 760.0;
const H: f64 = 460.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;

/// One metrics CSV reduced to `(frames, value)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub variant: String,
    pub seed: u64,
    pub points: Vec<(f64, f64)>,
}

/// Mean and range over the seeds of one variant at each evaluated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub variant: String,
    pub runs: usize,
    /// `(frames, mean, min, max)`.
    pub points: Vec<(f64, f64, f64, f64)>,
}

/// Reads `column` of a metrics CSV.
pub fn read_curve(text: &str, column: &str) -> Result<Curve, HarnessError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    if header.join(",") != METRICS_HEADER {
        return Err(HarnessError::Csv("not a metrics CSV (header mismatch)".into()));
    }
    let col = header
        .iter()
        .position(|h| *h == column)
        .ok_or_else(|| HarnessError::Csv(format!("unknown column {column:?}")))?;
    let (mut variant, mut seed, mut points) = (String::new(), 0, Vec::new());
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(HarnessError::Csv(format!("row {}: expected {} fields", i + 2, header.len())));
        }
        let num = |s: &str| -> Result<f64, HarnessError> {
            s.parse().map_err(|_| HarnessError::Csv(format!("row {}: bad number {s:?}", i + 2)))
        };
        variant = f[2].to_string();
        seed = f[3].parse().map_err(|_| HarnessError::Csv(format!("row {}: bad seed", i + 2)))?;
        points.push((num(f[0])?, num(f[col])?));
    }
    Ok(Curve { variant, seed, points })
}

/// Groups curves by variant and aggregates row-wise; rows whose value is
/// NaN in some run are dropped.
pub fn bands(curves: &[Curve]) -> Vec<Band> {
    let mut by: BTreeMap<&str, Vec<&Curve>> = BTreeMap::new();
    for c in curves {
        by.entry(c.variant.as_str()).or_default().push(c);
    }
    by.into_iter()
        .map(|(variant, runs)| {
            let n = runs.iter().map(|c| c.points.len()).min().unwrap_or(0);
            let points = (0..n)
                .filter_map(|i| {
                    let vals: Vec<f64> = runs.iter().map(|c| c.points[i].1).collect();
                    if vals.iter().any(|v| v.is_nan()) {
                        return None;
                    }
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    Some((runs[0].points[i].0, mean, lo, hi))
                })
                .collect();
            Band {
                variant: variant.to_string(),
                runs: runs.len(),
                points,
            }
        })
        .collect()
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= n as f64).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
    }
    out
}

/// Renders `bands` as one SVG document.
pub fn render_svg(bands: &[Band], title: &str, y_label: &str) -> String {
    let pts = bands.iter().flat_map(|b| b.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, _, lo, hi) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(title));
    for t in nice_ticks(x0, x1, 6) {
        let x = sx(t);
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{TOP}" x2="{x:.1}" y2="{:.1}" stroke="#eee"/>"##, TOP + ph);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, fmt_tick(t));
    }
    for t in nice_ticks(y0, y1, 5) {
        let y = sy(t);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#eee"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(t));
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">frames</text>"#, LEFT + pw / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for (i, b) in bands.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if b.points.is_empty() {
            continue;
        }
        let upper: Vec<String> = b.points.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.3))).collect();
        let lower: Vec<String> = b.points.iter().rev().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.2))).collect();
        let _ = writeln!(
            s,
            r#"<polygon class="band" data-variant="{}" points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            escape(&b.variant),
            upper.join(" "),
            lower.join(" ")
        );
        let mean: Vec<String> = b.points.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" data-variant="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(&b.variant),
            mean.join(" ")
        );
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 20.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{} (n={})</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&b.variant),
            b.runs
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(t: f64) -> String {
    if t.abs() >= 1e6 {
        format!("{}M", t / 1e6)
    } else if t.abs() >= 1e3 {
        format!("{}k", t / 1e3)
    } else {
        let r = (t * 1e6).round() / 1e6;
        format!("{r}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Reads every `metrics.csv` given and writes the SVG to `out`.
pub fn plot_files(inputs: &[&Path], column: &str, out: &Path) -> Result<Vec<Band>, HarnessError> {
    let mut curves = Vec::with_capacity(inputs.len());
    for p in inputs {
        let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))?;
        curves.push(read_curve(&text, column).map_err(|e| HarnessError::Csv(format!("{}: {e}", p.display())))?);
    }
    let b = bands(&curves);
    let svg = render_svg(&b, &format!("{column} by variant"), column);
    std::fs::write(out, svg).map_err(|e| HarnessError::Io(format!("{}: {e}", out.display())))?;
    Ok(b)
}
