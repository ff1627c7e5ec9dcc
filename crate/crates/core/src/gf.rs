//! Reference trainer: plain gradient flow (or small-step gradient descent) on
//! the full parameter vector from the same small initialization the engine uses.
//!
//! Time is reported in accelerated units τ: the flow integrated is
//! dΘ/dτ = −η∇ℒ(Θ), so raw training time is t = ητ.

use serde::{Deserialize, Serialize};

use crate::engine::{accelerated_rate, l2, ModelContract};
use crate::error::{AgfError, Result};
use crate::numerics::ode::{drive, Flow, StepControl};

/// Named scalar summaries of a parameter vector, recorded along a run.
pub trait Observe: ModelContract {
    fn observable_names(&self) -> Vec<String>;
    fn observables(&self, params: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GfIntegrator {
    /// Integrate the flow with the given step control.
    Flow { ctrl: StepControl },
    /// Explicit Euler with step `dt` in accelerated units; `None` picks
    /// η·dt = 0.1/λ with λ a Hessian spectral-norm estimate, refreshed periodically.
    Descent { dt: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfConfig {
    pub alpha: f64,
    pub seed: u64,
    /// Final accelerated time.
    pub tau_end: f64,
    pub integrator: GfIntegrator,
    /// Target number of samples on a uniform τ grid.
    pub samples: usize,
    /// Overrides η (defaults to the model's accelerated rate).
    pub eta: Option<f64>,
}

impl GfConfig {
    pub fn new(alpha: f64, seed: u64, tau_end: f64) -> Self {
        Self {
            alpha,
            seed,
            tau_end,
            integrator: GfIntegrator::Flow { ctrl: StepControl::stiff(1e-10, 1e-7) },
            samples: 2000,
            eta: None,
        }
    }
}

/// Sampled gradient-flow trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfRun {
    /// Accelerated times.
    pub times: Vec<f64>,
    pub raw_times: Vec<f64>,
    pub losses: Vec<f64>,
    pub observable_names: Vec<String>,
    /// One row per sample, aligned with `observable_names`.
    pub observables: Vec<Vec<f64>>,
    pub seed: u64,
    pub alpha: f64,
    pub eta: f64,
    pub final_params: Vec<f64>,
}

impl GfRun {
    /// Time series of one named observable.
    pub fn series(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.observable_names.iter().position(|n| n == name)?;
        Some(self.observables.iter().map(|row| row[k]).collect())
    }

    /// Largest relative uptick ℒ(t_{k+1}) − ℒ(t_k) over ℒ(0).
    pub fn max_uptick(&self) -> f64 {
        let l0 = self.losses.first().copied().unwrap_or(1.0).abs().max(f64::MIN_POSITIVE);
        self.losses.windows(2).map(|w| (w[1] - w[0]) / l0).fold(0.0, f64::max)
    }
}

fn full_index(h: usize) -> Vec<usize> {
    (0..h).collect()
}

/// Power-iteration estimate of the Hessian spectral norm via gradient differences.
pub fn hessian_norm<M: ModelContract>(model: &M, params: &[f64], iters: usize) -> f64 {
    let idx = full_index(model.num_neurons());
    let n = params.len();
    let mut g0 = vec![0.0; n];
    model.active_grad(&idx, params, &mut g0);
    let mut v: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
    let h = 1e-6 * l2(params).max(1e-3);
    let mut g = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut lam = 0.0;
    for _ in 0..iters {
        let nv = l2(&v);
        if nv == 0.0 {
            break;
        }
        for i in 0..n {
            x[i] = params[i] + h * v[i] / nv;
        }
        model.active_grad(&idx, &x, &mut g);
        for i in 0..n {
            v[i] = (g[i] - g0[i]) / h;
        }
        lam = l2(&v);
    }
    lam
}

/// Trains every neuron jointly from the model's small initialization.
pub fn gf_train<M: Observe>(model: &M, cfg: &GfConfig) -> Result<GfRun> {
    if !(cfg.alpha > 0.0) || !(cfg.tau_end > 0.0) {
        return Err(AgfError::Invalid(format!("need alpha > 0 and tau_end > 0, got {} and {}", cfg.alpha, cfg.tau_end)));
    }
    let eta = cfg.eta.unwrap_or_else(|| accelerated_rate(cfg.alpha, model.kappa(), model.init_norm_scale()));
    let idx = full_index(model.num_neurons());
    let y0: Vec<f64> = model.init_params(cfg.alpha, cfg.seed).concat();
    let n = y0.len();
    let mut run = GfRun {
        times: vec![],
        raw_times: vec![],
        losses: vec![],
        observable_names: model.observable_names(),
        observables: vec![],
        seed: cfg.seed,
        alpha: cfg.alpha,
        eta,
        final_params: vec![],
    };
    let spacing = cfg.tau_end / cfg.samples.max(1) as f64;
    let record = |run: &mut GfRun, t: f64, y: &[f64]| {
        run.times.push(t);
        run.raw_times.push(t * eta);
        run.losses.push(model.active_loss(&idx, y));
        run.observables.push(model.observables(y));
    };
    record(&mut run, 0.0, &y0);
    let mut next = spacing;
    let y_end = match cfg.integrator {
        GfIntegrator::Flow { ctrl } => {
            let ctrl = ctrl.with_dt_max(ctrl.dt_max.min(spacing));
            let mut field = |y: &[f64], dy: &mut [f64]| {
                model.active_grad(&idx, y, dy);
                dy.iter_mut().for_each(|v| *v *= -eta);
            };
            let (_, y, _) = drive(&mut field, &y0, 0.0, cfg.tau_end, &ctrl, |t, y| {
                if t >= next * (1.0 - 1e-12) || t >= cfg.tau_end {
                    record(&mut run, t, y);
                    while next <= t * (1.0 + 1e-12) {
                        next += spacing;
                    }
                }
                Flow::Continue
            })?;
            if run.times.last() != Some(&cfg.tau_end) && run.times.last().map_or(true, |&t| t < cfg.tau_end) {
                record(&mut run, cfg.tau_end, &y);
            }
            y
        }
        GfIntegrator::Descent { dt } => {
            let mut y = y0.clone();
            let mut g = vec![0.0; n];
            let mut t = 0.0;
            let mut step = dt.unwrap_or(0.0);
            let mut k = 0usize;
            while t < cfg.tau_end {
                if dt.is_none() && k % 200 == 0 {
                    let lam = hessian_norm(model, &y, 20).max(f64::MIN_POSITIVE);
                    step = (0.1 / (eta * lam)).min(spacing);
                }
                let hs = step.min(cfg.tau_end - t);
                model.active_grad(&idx, &y, &mut g);
                for i in 0..n {
                    y[i] -= eta * hs * g[i];
                }
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(AgfError::NonFinite { t });
                }
                t += hs;
                k += 1;
                if t >= next * (1.0 - 1e-12) || t >= cfg.tau_end {
                    record(&mut run, t, &y);
                    while next <= t * (1.0 + 1e-12) {
                        next += spacing;
                    }
                }
            }
            y
        }
    };
    run.final_params = y_end;
    Ok(run)
}
