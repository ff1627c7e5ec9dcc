//! Self-contained SVG figures from run CSVs: log-τ loss curves with predicted
//! plateaus and jump markers, observable trajectories with their limits, and a
//! power-over-time heatline for modular addition.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::CliError;
use crate::output::{read_run_csv, RunMeta};

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Loaded run: columns, rows and the optional sidecar.
pub struct RunData {
    pub stem: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub meta: Option<RunMeta>,
}

impl RunData {
    /// Accepts a run directory or a run CSV; the sidecar is `run.json` beside it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let csv = if path.is_dir() { path.join("run.csv") } else { path.to_path_buf() };
        let (columns, rows) = read_run_csv(&csv)?;
        let sidecar = csv.with_extension("json");
        let meta = if sidecar.exists() {
            let text = std::fs::read_to_string(&sidecar)?;
            Some(
                serde_json::from_str::<RunMeta>(&text)
                    .map_err(|e| CliError::SchemaMismatch(format!("{}: {e}", sidecar.display())))?,
            )
        } else {
            None
        };
        let stem = if path.is_dir() {
            path.file_name()
        } else if csv.file_stem().is_some_and(|s| s == "run") {
            csv.parent().and_then(|p| p.file_name())
        } else {
            csv.file_stem()
        }
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
        Ok(Self { stem, columns, rows, meta })
    }

    fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, lx: f64) -> f64 {
        LEFT + (lx - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }
    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
    fn inside_x(&self, lx: f64) -> bool {
        lx >= self.x0 && lx <= self.x1
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn log_range(taus: &[f64]) -> (f64, f64) {
    let pos: Vec<f64> = taus.iter().copied().filter(|t| *t > 0.0 && t.is_finite()).collect();
    if pos.is_empty() {
        return (-2.0, 1.0);
    }
    let lo = pos.iter().copied().fold(f64::INFINITY, f64::min).log10().floor();
    let hi = pos.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10().ceil();
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

fn value_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0f64, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !hi.is_finite() || hi <= lo {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    (if lo < 0.0 { lo - pad } else { lo }, hi + pad)
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + (W - LEFT - RIGHT) / 2.0, esc(title));
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(out, r##"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="#000000"/>"##);
    let mut k = f.x0;
    while k <= f.x1 + 1e-9 {
        let x = f.px(k);
        let _ = writeln!(out, r##"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{}" stroke="#000000"/>"##, b + 5.0);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{}" text-anchor="middle">1e{}</text>"#, b + 18.0, k as i64);
        k += 1.0;
    }
    for i in 0..=4 {
        let v = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let y = f.py(v);
        let _ = writeln!(out, r##"<line x1="{}" y1="{y:.2}" x2="{l}" y2="{y:.2}" stroke="#000000"/>"##, l - 5.0);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, l - 8.0, y + 4.0, tick(v));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 10.0, esc(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (t + b) / 2.0,
        esc(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e-2 && v.abs() < 1e4 {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

fn polyline(out: &mut String, f: &Frame, taus: &[f64], ys: &[f64], color: &str) {
    let pts: Vec<String> = taus
        .iter()
        .zip(ys)
        .filter(|(t, y)| **t > 0.0 && y.is_finite())
        .map(|(t, y)| format!("{:.2},{:.2}", f.px(t.log10()), f.py(*y)))
        .collect();
    if !pts.is_empty() {
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
    }
}

fn hline(out: &mut String, f: &Frame, y: f64, color: &str, dash: &str) {
    if y < f.y0 || y > f.y1 {
        return;
    }
    let yy = f.py(y);
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{yy:.2}" x2="{}" y2="{yy:.2}" stroke="{color}" stroke-dasharray="{dash}"/>"#,
        W - RIGHT
    );
}

/// Vertical marker; bounds are dotted, exact predictions dashed.
fn vline(out: &mut String, f: &Frame, tau: f64, bound: bool) {
    if tau <= 0.0 || !f.inside_x(tau.log10()) {
        return;
    }
    let x = f.px(tau.log10());
    let dash = if bound { "2,3" } else { "6,4" };
    let _ = writeln!(
        out,
        r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{}" stroke="#555555" stroke-dasharray="{dash}"/>"##,
        H - BOTTOM
    );
}

fn legend(out: &mut String, entries: &[(String, &str)]) {
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = TOP + 10.0 + 16.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, x + 18.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 24.0, y + 4.0, esc(name));
    }
}

fn jump_markers(out: &mut String, f: &Frame, meta: Option<&RunMeta>) {
    for s in meta.and_then(|m| m.prediction.as_ref()).map_or(&[][..], |p| &p.steps[..]).iter().skip(1) {
        match (s.tau, s.tau_lower_bound) {
            (Some(t), _) => vline(out, f, t, false),
            (None, Some(b)) => vline(out, f, b, true),
            _ => {}
        }
    }
}

/// Loss against log τ with dashed predicted plateau levels and jump markers.
pub fn loss_svg(run: &RunData) -> String {
    let taus = run.column(0);
    let losses = run.column(2);
    let pred = run.meta.as_ref().and_then(|m| m.prediction.as_ref());
    let (x0, x1) = log_range(&taus);
    let (y0, y1) = value_range(losses.iter().copied().chain(pred.iter().flat_map(|p| p.steps.iter().map(|s| s.loss))));
    let f = Frame { x0, x1, y0, y1 };
    let mut out = String::new();
    let title = match &run.meta {
        Some(m) => format!("{} loss, alpha = {:e}", m.model, m.alpha),
        None => format!("{} loss", run.stem),
    };
    header(&mut out, &title);
    axes(&mut out, &f, "accelerated time (log scale)", "loss");
    if let Some(p) = pred {
        for s in &p.steps {
            hline(&mut out, &f, s.loss, "#888888", "6,4");
        }
    }
    jump_markers(&mut out, &f, run.meta.as_ref());
    polyline(&mut out, &f, &taus, &losses, PALETTE[0]);
    let mut entries = vec![("gradient flow".to_string(), PALETTE[0])];
    if pred.is_some() {
        entries.push(("predicted".to_string(), "#888888"));
    }
    if !run.rows.is_empty() {
        legend(&mut out, &entries);
    }
    out.push_str("</svg>\n");
    out
}

/// Observable trajectories (singular values or coefficients) with dashed limits.
pub fn observables_svg(run: &RunData, prefix: &str) -> String {
    let taus = run.column(0);
    let cols: Vec<usize> = (3..run.columns.len()).filter(|&i| run.columns[i].starts_with(prefix)).collect();
    let targets: Vec<(String, f64)> = run.meta.as_ref().map_or(vec![], |m| m.observable_targets.clone());
    let vals = cols.iter().flat_map(|&i| run.rows.iter().map(move |r| r[i])).chain(targets.iter().map(|t| t.1));
    let (x0, x1) = log_range(&taus);
    let (y0, y1) = value_range(vals);
    let f = Frame { x0, x1, y0, y1 };
    let mut out = String::new();
    let what = match prefix {
        "sv_" => "singular values",
        "comp_" => "eigen-components",
        _ => "coefficients",
    };
    header(&mut out, &format!("{what}, {}", run.meta.as_ref().map_or(run.stem.clone(), |m| format!("{} alpha = {:e}", m.model, m.alpha))));
    axes(&mut out, &f, "accelerated time (log scale)", what);
    jump_markers(&mut out, &f, run.meta.as_ref());
    let mut entries = Vec::new();
    for (j, &i) in cols.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        if let Some((_, v)) = targets.iter().find(|t| t.0 == run.columns[i]) {
            hline(&mut out, &f, *v, color, "6,4");
        }
        polyline(&mut out, &f, &taus, &run.column(i), color);
        entries.push((run.columns[i].clone(), color));
    }
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}

/// One row per frequency, shaded by power relative to the run's maximum.
pub fn spectrum_svg(run: &RunData) -> String {
    let taus = run.column(0);
    let cols: Vec<usize> =
        (3..run.columns.len()).filter(|&i| run.columns[i].starts_with("power_") && run.columns[i] != "power_0").collect();
    let (x0, x1) = log_range(&taus);
    let f = Frame { x0, x1, y0: 0.0, y1: cols.len().max(1) as f64 };
    let mut out = String::new();
    header(&mut out, &format!("output power by frequency, {}", run.meta.as_ref().map_or(run.stem.clone(), |m| format!("alpha = {:e}", m.alpha))));
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(out, r##"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="#000000"/>"##);
    let mut k = f.x0;
    while k <= f.x1 + 1e-9 {
        let x = f.px(k);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{}" text-anchor="middle">1e{}</text>"#, b + 18.0, k as i64);
        k += 1.0;
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">accelerated time (log scale)</text>"#, (l + r) / 2.0, H - 10.0);
    let top = cols.iter().flat_map(|&i| run.rows.iter().map(move |row| row[i])).fold(0.0, f64::max);
    let idx: Vec<usize> = (0..run.rows.len()).filter(|&i| taus[i] > 0.0).collect();
    let stride = idx.len().div_ceil(200).max(1);
    let cells: Vec<usize> = idx.iter().copied().step_by(stride).collect();
    for (j, &c) in cols.iter().enumerate() {
        let (ya, yb) = (f.py(j as f64 + 1.0), f.py(j as f64));
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, l - 8.0, (ya + yb) / 2.0 + 4.0, esc(&run.columns[c].replace("power_", "k = ")));
        for (n, &i) in cells.iter().enumerate() {
            let xa = f.px(taus[i].log10());
            let xb = cells.get(n + 1).map_or(r, |&i2| f.px(taus[i2].log10()));
            let op = if top > 0.0 { (run.rows[i][c] / top).clamp(0.0, 1.0) } else { 0.0 };
            if op > 1e-3 {
                let _ = writeln!(
                    out,
                    r##"<rect x="{xa:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="#1f3b99" fill-opacity="{op:.3}"/>"##,
                    (xb - xa).max(0.5),
                    yb - ya
                );
            }
        }
    }
    jump_markers(&mut out, &f, run.meta.as_ref());
    out.push_str("</svg>\n");
    out
}

/// Writes every figure for each run into `out_dir`; returns the files written.
pub fn plot_runs(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for input in inputs {
        let run = RunData::load(input)?;
        let mut emit = |suffix: &str, svg: String| -> Result<(), CliError> {
            let path = out_dir.join(format!("{}_{suffix}.svg", run.stem));
            std::fs::write(&path, svg)?;
            written.push(path);
            Ok(())
        };
        emit("loss", loss_svg(&run))?;
        if run.rows.is_empty() {
            continue;
        }
        let has = |p: &str| run.columns.iter().any(|c| c.starts_with(p));
        if has("power_") {
            emit("spectrum", spectrum_svg(&run))?;
        }
        for (prefix, suffix) in [("sv_", "singular_values"), ("comp_", "components"), ("beta_", "coefficients")] {
            if has(prefix) {
                emit(suffix, observables_svg(&run, prefix))?;
            }
        }
    }
    Ok(written)
}
