//! Deterministic SVG line charts from logged CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 500.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    Empty,
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("unknown plot kind {0:?} (expected curve or coverage)")]
    Kind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Training return against env steps, from `curve.csv`.
    Curve,
    /// Tree coverage against expansion attempts, from `coverage.csv`.
    Coverage,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self, PlotError> {
        match s {
            "curve" => Ok(Self::Curve),
            "coverage" => Ok(Self::Coverage),
            _ => Err(PlotError::Kind(s.into())),
        }
    }

    pub fn columns(self) -> (&'static str, &'static str) {
        match self {
            Self::Curve => ("env_steps", "mean_return"),
            Self::Coverage => ("attempts", "coverage"),
        }
    }

    fn title(self) -> &'static str {
        match self {
            Self::Curve => "training return",
            Self::Coverage => "tree coverage",
        }
    }
}

/// One legend entry: the runs (usually one per seed) of a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub runs: Vec<Vec<(f64, f64)>>,
}

fn read_points(path: &Path, kind: PlotKind, header: &mut Option<String>) -> Result<Vec<(f64, f64)>, PlotError> {
    let err = |msg: String| PlotError::Read { path: path.display().to_string(), msg };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| err("empty file".into()))?.trim().to_string();
    match header {
        Some(h) if *h != head => return Err(PlotError::Schema(format!("{} has header {head:?}, expected {h:?}", path.display()))),
        Some(_) => {}
        None => *header = Some(head.clone()),
    }
    let cols: Vec<&str> = head.split(',').collect();
    let (xn, yn) = kind.columns();
    let find = |n: &str| cols.iter().position(|c| *c == n).ok_or_else(|| PlotError::Schema(format!("{} lacks column {n}", path.display())));
    let (xi, yi) = (find(xn)?, find(yn)?);
    let mut pts = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(err(format!("row {} has {} fields, header has {}", k + 2, f.len(), cols.len())));
        }
        let num = |i: usize| f[i].trim().parse::<f64>().map_err(|e| err(format!("row {}: {e}", k + 2)));
        pts.push((num(xi)?, num(yi)?));
    }
    Ok(pts)
}

/// Read every run of every series; all files must share one header.
pub fn load_series(groups: &[(String, Vec<PathBuf>)], kind: PlotKind) -> Result<Vec<Series>, PlotError> {
    let mut header = None;
    let mut out = Vec::with_capacity(groups.len());
    for (label, paths) in groups {
        let runs = paths.iter().map(|p| read_points(p, kind, &mut header)).collect::<Result<_, _>>()?;
        out.push(Series { label: label.clone(), runs });
    }
    Ok(out)
}

/// Per-index mean x, mean y, min y and max y over the runs, truncated to the shortest run.
pub fn band(runs: &[Vec<(f64, f64)>]) -> Vec<(f64, f64, f64, f64)> {
    let n = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|i| {
            let k = runs.len() as f64;
            let x = runs.iter().map(|r| r[i].0).sum::<f64>() / k;
            let y = runs.iter().map(|r| r[i].1).sum::<f64>() / k;
            let lo = runs.iter().map(|r| r[i].1).fold(f64::INFINITY, f64::min);
            let hi = runs.iter().map(|r| r[i].1).fold(f64::NEG_INFINITY, f64::max);
            (x, y, lo, hi)
        })
        .collect()
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Render the series as an 800x500 SVG: mean line and min/max band per series.
pub fn render_svg(series: &[Series], kind: PlotKind) -> Result<String, PlotError> {
    if series.is_empty() || series.iter().all(|s| s.runs.is_empty()) {
        return Err(PlotError::Empty);
    }
    let bands: Vec<_> = series.iter().map(|s| band(&s.runs)).collect();
    let (x0, x1) = range(bands.iter().flatten().map(|p| p.0));
    let (y0, y1) = range(bands.iter().flatten().flat_map(|p| [p.2, p.3]));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
    let (xn, yn) = kind.columns();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, kind.title());
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(s, r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#ddd"/>"##, TOP, TOP + ph);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, label(xv));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, py + 4.0, label(yv));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xn}</text>"#, LEFT + pw / 2.0, HEIGHT - 16.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{yn}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (k, (ser, b)) in series.iter().zip(&bands).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if b.len() > 1 && ser.runs.len() > 1 {
            let upper = b.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.3)));
            let lower = b.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.2)));
            let pts: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, pts.join(" "));
        }
        let pts: Vec<String> = b.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/>"#, lx + 22.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 28.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Load the groups, render and write the SVG to `out`.
pub fn plot(groups: &[(String, Vec<PathBuf>)], kind: PlotKind, out: &Path) -> Result<(), PlotError> {
    if groups.is_empty() {
        return Err(PlotError::Empty);
    }
    let svg = render_svg(&load_series(groups, kind)?, kind)?;
    fs::write(out, svg).map_err(|e| PlotError::Read { path: out.display().to_string(), msg: e.to_string() })
}
