//! Segmentation of a loss curve into plateaus and the drops between them.

use serde::{Deserialize, Serialize};

use crate::gf::GfRun;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauParams {
    /// A sample interval is flat when |Δℒ/Δτ| / ℒ(0) is below this.
    pub slope_rel: f64,
    /// Shortest flat stretch kept, as a fraction of the run's time span.
    pub min_duration_frac: f64,
}

impl Default for PlateauParams {
    fn default() -> Self {
        Self { slope_rel: 1e-3, min_duration_frac: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub start: f64,
    pub end: f64,
    /// Median loss over the stretch.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauReport {
    pub plateaus: Vec<Plateau>,
    /// Time at which the loss crosses the midpoint of consecutive plateau levels.
    pub drop_times: Vec<f64>,
    pub expected: usize,
    /// Set when the plateau count differs from `expected`.
    pub mismatch: Option<String>,
}

impl PlateauReport {
    pub fn levels(&self) -> Vec<f64> {
        self.plateaus.iter().map(|p| p.level).collect()
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// First time in `[from, to]` at which the loss crosses `level`, linearly interpolated.
pub fn crossing_time(times: &[f64], losses: &[f64], from: f64, to: f64, level: f64) -> Option<f64> {
    for i in 0..times.len().saturating_sub(1) {
        if times[i + 1] < from || times[i] > to {
            continue;
        }
        let (a, b) = (losses[i] - level, losses[i + 1] - level);
        if a == 0.0 {
            return Some(times[i]);
        }
        if a * b < 0.0 {
            return Some(times[i] + (times[i + 1] - times[i]) * a / (a - b));
        }
    }
    None
}

/// Plateaus of a sampled loss curve; `k_expected` drops mean `k_expected + 1`
/// plateaus, and any other count is reported in `mismatch`.
pub fn extract(times: &[f64], losses: &[f64], k_expected: usize, params: &PlateauParams) -> PlateauReport {
    let n = times.len().min(losses.len());
    let mut report = PlateauReport { plateaus: vec![], drop_times: vec![], expected: k_expected, mismatch: None };
    if n < 2 {
        report.mismatch = Some(format!("{n} samples; expected {} plateaus", k_expected + 1));
        return report;
    }
    let l0 = losses[0].abs().max(f64::MIN_POSITIVE);
    let span = times[n - 1] - times[0];
    let flat: Vec<bool> = (0..n - 1)
        .map(|i| {
            let dt = times[i + 1] - times[i];
            dt > 0.0 && ((losses[i + 1] - losses[i]) / dt).abs() / l0 < params.slope_rel
        })
        .collect();
    let mut i = 0;
    while i < n - 1 {
        if !flat[i] {
            i += 1;
            continue;
        }
        let s = i;
        while i < n - 1 && flat[i] {
            i += 1;
        }
        let (start, end) = (times[s], times[i]);
        if end - start >= params.min_duration_frac * span {
            let mut vals = losses[s..=i].to_vec();
            report.plateaus.push(Plateau { start, end, level: median(&mut vals) });
        }
    }
    for w in report.plateaus.windows(2) {
        let mid = 0.5 * (w[0].level + w[1].level);
        if let Some(t) = crossing_time(&times[..n], &losses[..n], w[0].end, w[1].start, mid) {
            report.drop_times.push(t);
        } else {
            report.drop_times.push(0.5 * (w[0].end + w[1].start));
        }
    }
    if report.plateaus.len() != k_expected + 1 {
        report.mismatch =
            Some(format!("found {} plateaus, expected {}", report.plateaus.len(), k_expected + 1));
    }
    report
}

/// [`extract`] on a gradient-flow run with default parameters.
pub fn plateau_extract(run: &GfRun, k_expected: usize) -> PlateauReport {
    extract(&run.times, &run.losses, k_expected, &PlateauParams::default())
}
