//! Minimal SVG line and scatter plots written by hand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiments::suite::RunReport;
use crate::leakage::AmplificationRow;
use crate::selective::ProjectionReport;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const MAX_POINTS: usize = 600;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.into(), points }
    }

    /// `y[i]` against `i`.
    pub fn indexed(name: impl Into<String>, ys: &[f64]) -> Self {
        Series::new(name, ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Keeps at most `MAX_POINTS` evenly strided points, always including the last.
fn thin(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    if points.len() <= MAX_POINTS {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(MAX_POINTS);
    let mut out: Vec<_> = points.iter().step_by(stride).copied().collect();
    if out.last() != points.last() {
        out.push(*points.last().expect("nonempty"));
    }
    out
}

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
    log_y: bool,
}

impl Axes {
    fn fit(series: &[Series], log_y: bool) -> Option<Self> {
        let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0));
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            let y = if log_y { y.log10() } else { y };
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return None;
        }
        let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Some(Axes { x: pad(x0, x1), y: pad(y0, y1), log_y })
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> Option<f64> {
        let y = if self.log_y {
            if y <= 0.0 {
                return None;
            }
            y.log10()
        } else {
            y
        };
        y.is_finite().then(|| H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM))
    }

    fn y_label(&self, v: f64) -> String {
        if self.log_y {
            format!("1e{v:.1}")
        } else {
            format!("{v:.3}")
        }
    }
}

fn frame(s: &mut String, title: &str, x_label: &str, y_label: &str, ax: &Axes) {
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="15" text-anchor="middle" font-family="sans-serif">{}</text>"#, W / 2.0, escape(title));
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = ax.x.0 + f * (ax.x.1 - ax.x.0);
        let yv = ax.y.0 + f * (ax.y.1 - ax.y.0);
        let xp = x0 + f * (x1 - x0);
        let yp = y1 - f * (y1 - y0);
        let _ = writeln!(s, r#"<text x="{xp:.1}" y="{:.1}" font-size="11" text-anchor="middle" font-family="sans-serif">{xv:.3}</text>"#, y1 + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end" font-family="sans-serif">{}</text>"#, x0 - 5.0, yp + 4.0, ax.y_label(yv));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 14.0 + 18.0 * i as f64;
        let x = W - RIGHT + 10.0;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{x}" y="{:.1}" width="12" height="12" fill="{c}"/>"#, y - 10.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}" font-size="11" font-family="sans-serif">{}</text>"#, x + 16.0, escape(name));
    }
}

/// Line plot; with `log_y` non-positive values are dropped.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> Option<String> {
    let ax = Axes::fit(series, log_y)?;
    let mut s = String::new();
    frame(&mut s, title, x_label, y_label, &ax);
    for (i, ser) in series.iter().enumerate() {
        let pts: Vec<String> = thin(&ser.points)
            .iter()
            .filter(|(x, _)| x.is_finite())
            .filter_map(|&(x, y)| ax.py(y).map(|py| format!("{:.2},{py:.2}", ax.px(x))))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#, PALETTE[i % PALETTE.len()], pts.join(" "));
    }
    legend(&mut s, &series.iter().map(|x| x.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    Some(s)
}

pub fn scatter_plot(title: &str, series: &[Series]) -> Option<String> {
    let ax = Axes::fit(series, false)?;
    let mut s = String::new();
    frame(&mut s, title, "view x", "view y", &ax);
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let r = if i == 0 { 4.0 } else { 2.0 };
        for &(x, y) in &thin(&ser.points) {
            if let Some(py) = ax.py(y) {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{py:.2}" r="{r}" fill="{c}" fill-opacity="0.6"/>"#, ax.px(x));
            }
        }
    }
    legend(&mut s, &series.iter().map(|x| x.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    Some(s)
}

/// Everything the plots need, independent of where it came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotData {
    pub pretrain_loss: Vec<f64>,
    pub naive_loss: Vec<f64>,
    pub projected_loss: Vec<f64>,
    pub projection: Vec<ProjectionReport>,
    pub amplification: Vec<(String, AmplificationRow)>,
    pub scatter: Vec<(String, [f64; 2])>,
}

impl PlotData {
    pub fn from_report(r: &RunReport) -> Self {
        PlotData {
            pretrain_loss: r.pretrain_losses.clone(),
            naive_loss: r.naive.as_ref().map(|n| n.losses.clone()).unwrap_or_default(),
            projected_loss: r.projected.as_ref().map(|p| p.losses.clone()).unwrap_or_default(),
            projection: r.projected.as_ref().map(|p| p.reports.clone()).unwrap_or_default(),
            amplification: r.amplification.clone(),
            scatter: r.scatter.clone(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pretrain_loss.is_empty()
            && self.naive_loss.is_empty()
            && self.projected_loss.is_empty()
            && self.projection.is_empty()
            && self.amplification.is_empty()
            && self.scatter.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotOutcome {
    pub written: Vec<PathBuf>,
    /// Set when nothing could be plotted.
    pub notice: Option<String>,
}

pub const PLOT_FILES: [&str; 5] = ["loss_curves.svg", "projection_dot.svg", "capacity.svg", "amplification.svg", "scatter.svg"];

fn grouped<T>(items: &[(String, T)]) -> Vec<(String, Vec<&T>)> {
    let mut out: Vec<(String, Vec<&T>)> = Vec::new();
    for (k, v) in items {
        match out.iter_mut().find(|(g, _)| g == k) {
            Some((_, vs)) => vs.push(v),
            None => out.push((k.clone(), vec![v])),
        }
    }
    out
}

fn plots(data: &PlotData) -> Vec<(&'static str, Option<String>)> {
    let loss = {
        let mut s = Vec::new();
        for (name, ys) in [("pretrain", &data.pretrain_loss), ("naive fine-tune", &data.naive_loss), ("projected fine-tune", &data.projected_loss)] {
            if !ys.is_empty() {
                s.push(Series::indexed(name, ys));
            }
        }
        line_plot("Training loss", "step", "DSM loss", &s, true)
    };
    let step = |r: &ProjectionReport| r.step as f64;
    let dot = line_plot(
        "Inner products with the feature gradient",
        "step",
        "|inner product|",
        &[
            Series::new("<g_main, g_feat>", data.projection.iter().map(|r| (step(r), r.dot_main_feat.abs())).collect()),
            Series::new("<g_proj, g_feat>", data.projection.iter().map(|r| (step(r), r.dot_proj_feat.abs())).collect()),
        ],
        true,
    );
    let mut cap = vec![
        Series::new("before step", data.projection.iter().map(|r| (step(r), r.capacity_before)).collect()),
        Series::new("after step", data.projection.iter().map(|r| (step(r), r.capacity_after)).collect()),
    ];
    let reference: Vec<_> = data.projection.iter().filter_map(|r| r.capacity_reference.map(|c| (step(r), c))).collect();
    if !reference.is_empty() {
        cap.push(Series::new("frozen reference", reference));
    }
    let capacity = line_plot("Capacity along the feature gradient", "step", "capacity", &cap, true);
    let mut amp = Vec::new();
    for (stage, rows) in grouped(&data.amplification) {
        amp.push(Series::new(format!("{stage} empirical"), rows.iter().map(|r| (r.n as f64, r.empirical)).collect()));
        amp.push(Series::new(format!("{stage} closed form"), rows.iter().map(|r| (r.n as f64, r.closed_form)).collect()));
    }
    let amplification = line_plot("Hit probability within N draws", "N", "probability", &amp, false);
    let sc: Vec<Series> = grouped(&data.scatter)
        .into_iter()
        .map(|(src, pts)| Series::new(src, pts.iter().map(|p| (p[0], p[1])).collect()))
        .collect();
    let scatter = scatter_plot("Generated vs protected samples", &sc);
    PLOT_FILES.into_iter().zip([loss, dot, capacity, amplification, scatter]).collect()
}

/// Writes every plot the data supports. An empty report writes nothing and
/// returns a notice.
pub fn emit_plots(data: &PlotData, dir: &Path) -> Result<PlotOutcome> {
    if data.is_empty() {
        return Ok(PlotOutcome { written: Vec::new(), notice: Some("report is empty; no plots written".into()) });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut missing = Vec::new();
    for (name, svg) in plots(data) {
        match svg {
            Some(svg) => {
                let p = dir.join(name);
                fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
                written.push(p);
            }
            None => missing.push(name),
        }
    }
    let notice = (!missing.is_empty()).then(|| format!("no data for {}", missing.join(", ")));
    Ok(PlotOutcome { written, notice })
}
