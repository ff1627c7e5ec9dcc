//! Builds problems from a config and runs the predictor, the AGF engine or
//! the gradient-flow trainer on them.

use agf_core::models::attn::{attn_sequence, optimal_magnitude, AttnProblem};
use agf_core::models::dln::{agf_dln_sequence, dln_sequence, pesme_algorithm, DlnProblem};
use agf_core::models::fcln::{conjecture_sequence, FclnProblem};
use agf_core::models::modadd::{modadd_sequence, ModAddProblem};
use agf_core::numerics::{svd, Mat, StepControl, Vector};
use agf_core::plateau::PlateauParams;
use agf_core::rng::{gaussian, neuron_rng};
use agf_core::{
    compare_curve, engine, gf_train, probe_curve, AgfTrace, CompareReport, EngineConfig, GfConfig, GfIntegrator, GfRun,
    PredictedSequence, Tolerances,
};
use serde::{Deserialize, Serialize};

use crate::config::{read_matrix_text, LoadedConfig, Measure, Method, ModelKind, Reference};
use crate::error::CliError;

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub workers: Option<usize>,
    pub fixed_step: bool,
    pub allow_large_alpha: bool,
    pub out: Option<std::path::PathBuf>,
    /// Output directory used when neither `--out` nor the config sets one.
    pub env_out: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone)]
pub enum Problem {
    Dln(DlnProblem),
    Fcln(FclnProblem),
    Attn(AttnProblem),
    Modadd(ModAddProblem),
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Mat, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    if r == 0 || c == 0 || rows.iter().any(|v| v.len() != c) {
        return Err(CliError::Config(format!("{what}: expected a non-empty rectangular matrix")));
    }
    Ok(Mat::from_row_slice(r, c, &rows.concat()))
}

/// Builds the configured problem at initialization scale `alpha`.
pub fn build(lc: &LoadedConfig, alpha: f64) -> Result<Problem, CliError> {
    let c = &lc.config;
    let bad = |sec: &str, key: &str| {
        let sec = sec.to_string();
        let key = key.to_string();
        move |e: agf_core::AgfError| lc.error_at(Some(&sec), &key, e)
    };
    Ok(match c.model {
        ModelKind::Dln => {
            let d = c.dln.as_ref().expect("validated");
            if d.two_coordinate {
                Problem::Dln(DlnProblem::two_coordinate(alpha))
            } else if let Some(r) = &d.random {
                if r.d == 0 || r.n == 0 {
                    return Err(lc.error_at(Some("dln"), "random", "d and n must be positive"));
                }
                let x = gaussian(&mut neuron_rng(r.seed, 0), r.d * r.n, 1.0);
                let y = gaussian(&mut neuron_rng(r.seed, 1), r.n, 1.0);
                let p = DlnProblem::new(Mat::from_row_slice(r.d, r.n, &x), Vector::from_vec(y), alpha)
                    .map_err(bad("dln", "random"))?;
                Problem::Dln(p)
            } else {
                let (x, y, key) = match (&d.x, &d.y, &d.x_file, &d.y_file) {
                    (Some(x), Some(y), _, _) => (x.clone(), y.clone(), "x"),
                    (_, _, Some(xf), Some(yf)) => {
                        let x = read_matrix_text(&lc.resolve(xf))?;
                        let y = read_matrix_text(&lc.resolve(yf))?.concat();
                        (x, y, "x_file")
                    }
                    _ => unreachable!("validated"),
                };
                let x = matrix(&x, "dln.x").map_err(|e| lc.error_at(Some("dln"), key, e))?;
                Problem::Dln(DlnProblem::new(x, Vector::from_vec(y), alpha).map_err(bad("dln", key))?)
            }
        }
        ModelKind::Fcln => {
            let f = c.fcln.as_ref().expect("validated");
            let p = if let Some(s) = &f.diagonal {
                FclnProblem::diagonal(s, f.hidden, alpha).map_err(bad("fcln", "diagonal"))?
            } else if let Some(pl) = &f.power_law {
                FclnProblem::power_law(pl.c, pl.d, f.hidden, pl.exponent, pl.seed, alpha).map_err(bad("fcln", "power_law"))?
            } else {
                let sxx = matrix(f.sigma_xx.as_ref().expect("validated"), "sigma_xx")
                    .map_err(|e| lc.error_at(Some("fcln"), "sigma_xx", e))?;
                let syx = matrix(f.sigma_yx.as_ref().expect("validated"), "sigma_yx")
                    .map_err(|e| lc.error_at(Some("fcln"), "sigma_yx", e))?;
                FclnProblem::new(sxx, syx, f.hidden, alpha).map_err(bad("fcln", "sigma_xx"))?
            };
            Problem::Fcln(p)
        }
        ModelKind::Attn => {
            let a = c.attn.as_ref().expect("validated");
            let p = if let Some(ev) = &a.eigenvalues {
                AttnProblem::diagonal(ev, a.n_ctx, a.heads, alpha).map_err(bad("attn", "eigenvalues"))?
            } else if let Some(pl) = &a.power_law {
                AttnProblem::power_law(pl.d, pl.exponent, a.n_ctx, a.heads, alpha).map_err(bad("attn", "power_law"))?
            } else {
                let s = matrix(a.sigma_xx.as_ref().expect("validated"), "sigma_xx")
                    .map_err(|e| lc.error_at(Some("attn"), "sigma_xx", e))?;
                AttnProblem::new(s, a.n_ctx, a.heads, alpha).map_err(bad("attn", "sigma_xx"))?
            };
            Problem::Attn(p)
        }
        ModelKind::Modadd => {
            let m = c.modadd.as_ref().expect("validated");
            let mut p = if let Some(s) = &m.spectrum {
                ModAddProblem::from_spectrum(m.p, s, m.hidden, alpha).map_err(bad("modadd", "spectrum"))?
            } else {
                ModAddProblem::new(m.p, m.x.clone().expect("validated"), m.hidden, alpha).map_err(bad("modadd", "x"))?
            };
            if c.engine.batch_window.is_some() {
                p.batch_window = c.engine.batch_window;
            }
            Problem::Modadd(p)
        }
    })
}

impl Problem {
    pub fn model(&self) -> &'static str {
        match self {
            Self::Dln(_) => "dln",
            Self::Fcln(_) => "fcln",
            Self::Attn(_) => "attn",
            Self::Modadd(_) => "modadd",
        }
    }

    /// Analytic prediction of the saddle sequence.
    pub fn predict(&self) -> Result<PredictedSequence, CliError> {
        Ok(match self {
            Self::Dln(p) => dln_sequence(p)?,
            Self::Fcln(p) => conjecture_sequence(p)?,
            Self::Attn(p) => attn_sequence(p),
            Self::Modadd(p) => modadd_sequence(p),
        })
    }

    /// The AGF engine (the analytic path for diagonal networks).
    pub fn agf(&self, cfg: &EngineConfig) -> Result<AgfTrace, CliError> {
        Ok(match self {
            Self::Dln(p) => agf_dln_sequence(p)?,
            Self::Fcln(p) => engine::run(&p.basis(), cfg)?,
            Self::Attn(p) => engine::run(p, cfg)?,
            Self::Modadd(p) => engine::run(p, cfg)?,
        })
    }

    pub fn gf(&self, cfg: &GfConfig) -> Result<GfRun, CliError> {
        Ok(match self {
            Self::Dln(p) => gf_train(p, cfg)?,
            Self::Fcln(p) => gf_train(p, cfg)?,
            Self::Attn(p) => gf_train(p, cfg)?,
            Self::Modadd(p) => gf_train(p, cfg)?,
        })
    }

    /// Limiting values of recorded observables, drawn as reference lines.
    pub fn observable_targets(&self) -> Vec<(String, f64)> {
        match self {
            Self::Dln(p) => pesme_algorithm(p)
                .ok()
                .and_then(|s| s.betas.last().cloned())
                .map(|b| b.iter().enumerate().map(|(i, v)| (format!("beta_{i}"), *v)).collect())
                .unwrap_or_default(),
            Self::Fcln(p) => {
                let rank = p.c().min(p.d()).min(p.h);
                p.target()
                    .and_then(|t| svd(&t))
                    .map(|(_, s, _)| s.iter().take(rank).enumerate().map(|(k, v)| (format!("sv_{k}"), *v)).collect())
                    .unwrap_or_default()
            }
            Self::Attn(p) => (1..=p.d().min(p.h)).map(|k| (format!("comp_{}", k - 1), optimal_magnitude(p, k))).collect(),
            Self::Modadd(_) => vec![],
        }
    }

    /// Observable name tracking each predicted step's feature, in predicted order.
    pub fn feature_keys(&self, pred: &PredictedSequence) -> Vec<String> {
        let mut keys: Vec<String> = Vec::new();
        for step in pred.steps.iter().skip(1) {
            let f = step.feature.as_str();
            match self {
                Self::Modadd(_) => {
                    if let Some(k) = f.strip_prefix("xi=") {
                        keys.push(format!("power_{k}"));
                    }
                }
                Self::Fcln(_) => {
                    if let Some(r) = f.strip_prefix("rank=").and_then(|r| r.parse::<usize>().ok()) {
                        keys.push(format!("sv_{}", r.saturating_sub(1)));
                    }
                }
                Self::Attn(_) => {
                    if let Some(j) = f.strip_prefix("eig=") {
                        keys.push(format!("comp_{j}"));
                    }
                }
                Self::Dln(_) => {
                    for part in f.strip_prefix("support=").unwrap_or("").split(',').filter(|s| !s.is_empty()) {
                        let key = format!("beta_{}", part.trim_start_matches(['+', '-']));
                        if !keys.contains(&key) {
                            keys.push(key);
                        }
                    }
                }
            }
        }
        keys
    }
}

/// Run parameters resolved from config and flags.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub alpha: f64,
    pub seed: u64,
}

pub fn resolve_single(lc: &LoadedConfig, opts: &RunOptions) -> Result<Resolved, CliError> {
    let c = &lc.config;
    let alpha = match (opts.alpha, c.alpha, c.alphas.as_deref()) {
        (Some(a), _, _) => a,
        (None, Some(a), _) => a,
        (None, None, Some([a])) => *a,
        _ => return Err(lc.error_at(None, "alphas", "a single run needs alpha (alphas is for sweeps)")),
    };
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(CliError::Config(format!("--alpha must be positive and finite, got {alpha}")));
    }
    Ok(Resolved { alpha, seed: opts.seed.unwrap_or(c.seed) })
}

/// Rejects α ≥ 1, where training leaves the saddle-to-saddle regime.
pub fn guard_alpha(alpha: f64, opts: &RunOptions) -> Result<(), CliError> {
    if alpha >= 1.0 && !opts.allow_large_alpha {
        return Err(CliError::Config(format!(
            "KernelRegimeWarning: alpha = {alpha} >= 1 is outside the small-initialization regime; \
             pass --allow-large-alpha to run anyway"
        )));
    }
    Ok(())
}

pub fn engine_config(lc: &LoadedConfig, r: &Resolved) -> EngineConfig {
    let mut cfg = EngineConfig::new(r.alpha, r.seed);
    let e = &lc.config.engine;
    if let Some(t) = e.t_max {
        cfg.t_max = t;
    }
    if e.batch_window.is_some() {
        cfg.batch_window = e.batch_window;
    }
    if let Some(m) = e.max_events {
        cfg.max_events = m;
    }
    cfg
}

/// Default horizon: 1.5× the last predicted jump time or bound.
pub fn tau_end(lc: &LoadedConfig, pred: &PredictedSequence) -> Result<f64, CliError> {
    if let Some(t) = lc.config.gf.tau_end {
        return Ok(t);
    }
    pred.steps
        .iter()
        .filter_map(|s| s.tau.or(s.tau_lower_bound))
        .filter(|t| t.is_finite() && *t > 0.0)
        .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))))
        .map(|t| 1.5 * t)
        .ok_or_else(|| lc.error_at(Some("gf"), "tau_end", "no predicted jump time to derive tau_end from; set it"))
}

pub fn gf_config(lc: &LoadedConfig, r: &Resolved, tau_end: f64, opts: &RunOptions) -> GfConfig {
    let g = &lc.config.gf;
    let mut cfg = GfConfig::new(r.alpha, r.seed, tau_end);
    cfg.samples = g.samples;
    let fixed_dt = g.dt.unwrap_or(tau_end / (50.0 * g.samples as f64));
    cfg.integrator = match (g.method, opts.fixed_step) {
        (Method::Descent, _) => GfIntegrator::Descent { dt: g.dt.or(opts.fixed_step.then_some(fixed_dt)) },
        (Method::Rk4, _) | (_, true) => GfIntegrator::Flow { ctrl: StepControl::fixed(fixed_dt) },
        (Method::Rkc, false) => GfIntegrator::Flow { ctrl: StepControl::stiff(g.atol, g.rtol) },
        (Method::Rk45, false) => GfIntegrator::Flow { ctrl: StepControl::adaptive(g.atol, g.rtol) },
    };
    cfg
}

/// Measured order in which predicted features are learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCheck {
    pub predicted: Vec<String>,
    pub measured: Vec<String>,
    /// τ at which each measured feature first reached half its final magnitude.
    pub rise_times: Vec<f64>,
    pub pass: bool,
    pub note: String,
}

/// Orders features by the first time |observable| reaches half its final
/// value; features ending below 1e-3 of the largest are treated as unlearned.
pub fn feature_order(keys: &[String], run: &GfRun, flags: &[String]) -> OrderCheck {
    let finals: Vec<(String, Vec<f64>)> = keys.iter().filter_map(|k| run.series(k).map(|s| (k.clone(), s))).collect();
    let top = finals.iter().filter_map(|(_, s)| s.last()).map(|v| v.abs()).fold(0.0, f64::max);
    let mut rises: Vec<(String, f64)> = finals
        .iter()
        .filter_map(|(k, s)| {
            let fin = s.last()?.abs();
            if fin <= 1e-3 * top {
                return None;
            }
            let i = s.iter().position(|v| v.abs() >= 0.5 * fin)?;
            Some((k.clone(), run.times[i]))
        })
        .collect();
    rises.sort_by(|a, b| a.1.total_cmp(&b.1));
    let measured: Vec<String> = rises.iter().map(|r| r.0.clone()).collect();
    let tie = flags.iter().any(|f| f.contains("equal magnitude"));
    let (pass, note) = if tie {
        (true, "prediction has tied features; order not checked".to_string())
    } else if measured == keys {
        (true, String::new())
    } else {
        (false, "learned order differs from prediction".to_string())
    };
    OrderCheck { predicted: keys.to_vec(), measured, rise_times: rises.iter().map(|r| r.1).collect(), pass, note }
}

/// Everything a compare run produces.
#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub prediction: PredictedSequence,
    pub run: GfRun,
    pub gf: GfConfig,
    pub report: CompareReport,
    pub order: OrderCheck,
    pub trace: Option<AgfTrace>,
}

impl CompareOutcome {
    pub fn pass(&self) -> bool {
        self.report.pass && self.order.pass
    }

    /// Largest relative deviation of levels and exact drop times.
    pub fn max_dev(&self) -> f64 {
        self.report.max_loss_err().max(self.report.max_tau_err())
    }
}

pub fn compare_one(lc: &LoadedConfig, problem: &Problem, r: &Resolved, opts: &RunOptions) -> Result<CompareOutcome, CliError> {
    let analytic = problem.predict()?;
    let (prediction, trace) = match lc.config.compare.reference {
        Reference::Predict => (analytic.clone(), None),
        Reference::Agf => {
            let trace = problem.agf(&engine_config(lc, r))?;
            (PredictedSequence::from_trace(&trace, problem.model()), Some(trace))
        }
    };
    let tau = tau_end(lc, &prediction)?;
    let gf = gf_config(lc, r, tau, opts);
    let run = problem.gf(&gf)?;
    let cs = &lc.config.compare;
    let tol = Tolerances { loss_rel: cs.loss_rel, tau_rel: cs.tau_rel, zero_floor: cs.zero_floor };
    let report = match cs.measure {
        Measure::Extract => {
            let params = PlateauParams { slope_rel: cs.slope_rel, min_duration_frac: cs.min_duration_frac };
            compare_curve(&prediction, &run.times, &run.losses, &params, &tol)
        }
        Measure::Probe => probe_curve(&prediction, &run.times, &run.losses, &tol),
    };
    let order = feature_order(&problem.feature_keys(&analytic), &run, &analytic.flags);
    Ok(CompareOutcome { prediction, run, gf, report, order, trace })
}
