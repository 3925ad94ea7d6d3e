//! Static SVG rendering of traces, detector trajectories and sweep tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::detect::{metrics_from_trajectory, Phase};
use super::sweep::SweepRow;
use super::trace::parse_trace;
use super::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Generate,
    Detector,
    Sweep,
}

const W: f64 = 720.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

struct Canvas {
    x: (f64, f64),
    y: (f64, f64),
    body: String,
}

impl Canvas {
    fn new(title: &str, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) -> Self {
        let fix = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let mut c = Self {
            x: fix(x),
            y: fix(y),
            body: String::new(),
        };
        let _ = write!(
            c.body,
            r#"<rect width="{W}" height="{H}" fill="white"/><text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD / 2.0, PAD / 2.0);
        let _ = write!(
            c.body,
            r#"<polyline points="{x0},{y1} {x0},{y0} {x1},{y0}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = c.x.0 + f * (c.x.1 - c.x.0);
            let yv = c.y.0 + f * (c.y.1 - c.y.0);
            let _ = write!(
                c.body,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
                c.px(xv),
                y0 + 14.0,
                tick(xv),
                x0 - 4.0,
                c.py(yv) + 3.0,
                tick(yv)
            );
        }
        let _ = write!(
            c.body,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text><text x="12" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 12 {:.1})">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 8.0,
            escape(xlabel),
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(ylabel)
        );
        c
    }

    fn px(&self, v: f64) -> f64 {
        PAD + (v - self.x.0) / (self.x.1 - self.x.0) * (W - 1.5 * PAD)
    }

    fn py(&self, v: f64) -> f64 {
        (H - PAD) - (v - self.y.0) / (self.y.1 - self.y.0) * (H - 1.5 * PAD)
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let p: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", self.px(x), self.py(y)))
            .collect();
        let dash = if dashed {
            r#" stroke-dasharray="4 3""#
        } else {
            ""
        };
        let _ = write!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.2"{dash}/>"#,
            p.join(" ")
        );
    }

    fn vline(&mut self, x: f64, color: &str) {
        let px = self.px(x);
        let _ = write!(
            self.body,
            r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="{color}" stroke-width="1"/>"#,
            PAD / 2.0,
            H - PAD
        );
    }

    fn finish(self) -> String {
        format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">{}</svg>
"#,
            self.body
        )
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    })
}

fn plot_generate(text: &str) -> Result<Vec<(String, String)>> {
    let (header, records) = parse_trace(text)?;
    let delta = header.config.drift.delta;
    let n = records.len().max(1) as f64;
    let win: Vec<_> = records.iter().filter(|r| r.alignment.is_some()).collect();
    let pts: Vec<(f64, f64)> = win
        .iter()
        .map(|r| (r.t as f64, r.alignment.unwrap_or(0.0)))
        .collect();
    let mu: Vec<(f64, f64)> = win
        .iter()
        .map(|r| (r.t as f64, r.mu.unwrap_or(0.0)))
        .collect();
    let thr: Vec<(f64, f64)> = win
        .iter()
        .map(|r| {
            (
                r.t as f64,
                r.mu.unwrap_or(0.0) - delta * r.sigma.unwrap_or(0.0),
            )
        })
        .collect();
    let (lo, hi) = bounds(pts.iter().chain(&thr).chain(&mu).map(|p| p.1));
    let y = if lo.is_finite() {
        (lo.min(hi - 1e-3), hi)
    } else {
        (0.0, 1.0)
    };
    let mut c = Canvas::new(
        "Window alignment to reference centroid",
        (0.0, n),
        y,
        "token",
        "cosine",
    );
    for r in records.iter().filter(|r| r.rebuild.is_some()) {
        c.vline(r.t as f64, "#bbbbbb");
    }
    for r in records.iter().filter(|r| r.event) {
        c.vline(r.t as f64, "#d62728");
    }
    c.polyline(&mu, "#7f7f7f", true);
    c.polyline(&thr, "#ff7f0e", true);
    c.polyline(&pts, "#1f77b4", false);
    let alignment = c.finish();

    let dens: Vec<(f64, f64)> = records
        .iter()
        .map(|r| {
            (
                r.t as f64,
                r.density.iter().sum::<f64>() / r.density.len().max(1) as f64,
            )
        })
        .collect();
    let mut c = Canvas::new(
        "Mean FFN density",
        (0.0, n),
        (0.0, 1.0),
        "token",
        "kept fraction",
    );
    c.polyline(&dens, "#2ca02c", false);
    Ok(vec![
        ("alignment.svg".into(), alignment),
        ("density.svg".into(), c.finish()),
    ])
}

fn plot_detector(text: &str) -> Result<Vec<(String, String)>> {
    let report = metrics_from_trajectory(text)?;
    let all = report.runs.iter().flat_map(|r| &r.windows);
    let (x_hi, (lo, hi)) = (
        all.clone().map(|w| w.token_end).max().unwrap_or(1) as f64,
        bounds(all.clone().map(|w| w.alignment)),
    );
    let y = if lo.is_finite() {
        (lo.min(hi - 1e-3), hi)
    } else {
        (0.0, 1.0)
    };
    let mut c = Canvas::new("Detector trajectories", (0.0, x_hi), y, "token", "cosine");
    if let Some(first_after) = all.clone().find(|w| w.phase == Phase::After) {
        c.vline(
            (first_after.token_end - report.drift.window) as f64,
            "#d62728",
        );
    }
    for r in &report.runs {
        let pts: Vec<(f64, f64)> = r
            .windows
            .iter()
            .map(|w| (w.token_end as f64, w.alignment))
            .collect();
        c.polyline(&pts, "#1f77b4", false);
    }
    Ok(vec![("trajectory.svg".into(), c.finish())])
}

fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| HarnessError::Trace { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("{s:?}: {e}")))
        };
        let int = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("{s:?}: {e}")))
        };
        rows.push(SweepRow {
            layer: int(f[0])?,
            ratio: num(f[1])?,
            mean_sensitivity: num(f[2])?,
            kl: num(f[3])?,
            match_len: int(f[4])?,
        });
    }
    Ok(rows)
}

/// Layer × ratio grid shaded by KL divergence.
pub fn heatmap_svg(rows: &[SweepRow]) -> String {
    let mut layers: Vec<usize> = rows.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let max_kl = rows.iter().map(|r| r.kl).fold(0.0f64, f64::max).max(1e-12);
    let cell_w = (W - 2.0 * PAD) / ratios.len().max(1) as f64;
    let cell_h = (H - 2.0 * PAD) / layers.len().max(1) as f64;
    let mut body = String::new();
    let _ = write!(
        body,
        r#"<rect width="{W}" height="{H}" fill="white"/><text x="{}" y="20" font-size="14" text-anchor="middle">KL divergence, one layer pruned (max {:.4})</text>"#,
        W / 2.0,
        max_kl
    );
    for r in rows {
        let (Some(li), Some(ri)) = (
            layers.iter().position(|&l| l == r.layer),
            ratios.iter().position(|&x| x == r.ratio),
        ) else {
            continue;
        };
        let shade = (255.0 * (1.0 - r.kl / max_kl)).round() as u8;
        let _ = write!(
            body,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="rgb(255,{shade},{shade})" stroke="gray"/>"#,
            PAD + ri as f64 * cell_w,
            PAD + li as f64 * cell_h,
            cell_w,
            cell_h
        );
    }
    for (li, l) in layers.iter().enumerate() {
        let _ = write!(
            body,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">L{l}</text>"#,
            PAD - 4.0,
            PAD + (li as f64 + 0.5) * cell_h + 3.0
        );
    }
    for (ri, r) in ratios.iter().enumerate() {
        let _ = write!(
            body,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{r}</text>"#,
            PAD + (ri as f64 + 0.5) * cell_w,
            H - PAD + 14.0
        );
    }
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">{body}</svg>
"#
    )
}

fn detect_kind(text: &str) -> Result<PlotKind> {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.starts_with("layer,") {
        return Ok(PlotKind::Sweep);
    }
    let v: serde_json::Value = serde_json::from_str(first).map_err(|e| HarnessError::Trace {
        line: 1,
        msg: e.to_string(),
    })?;
    match v.get("type").and_then(|t| t.as_str()) {
        Some("header") => Ok(PlotKind::Generate),
        Some("detector") => Ok(PlotKind::Detector),
        other => Err(HarnessError::Trace {
            line: 1,
            msg: format!("unknown input kind {other:?}"),
        }),
    }
}

/// Renders every plot the input supports as (file name, SVG) pairs.
pub fn plot_text(text: &str) -> Result<(PlotKind, Vec<(String, String)>)> {
    let kind = detect_kind(text)?;
    let plots = match kind {
        PlotKind::Generate => plot_generate(text)?,
        PlotKind::Detector => plot_detector(text)?,
        PlotKind::Sweep => vec![("heatmap.svg".into(), heatmap_svg(&parse_sweep_csv(text)?))],
    };
    Ok((kind, plots))
}

/// Reads a trace, trajectory or sweep CSV and writes its plots to `out_dir`.
pub fn plot_file(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(input)?;
    let (_, plots) = plot_text(&text)?;
    std::fs::create_dir_all(out_dir)?;
    plots
        .into_iter()
        .map(|(name, svg)| {
            let path = out_dir.join(name);
            std::fs::write(&path, svg)?;
            Ok(path)
        })
        .collect()
}
