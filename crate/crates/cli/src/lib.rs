//! Experiment front end for Alternating Gradient Flows: config loading, run
//! orchestration, artifact writing and SVG plots. The `agf` binary is a thin
//! wrapper over [`cmd_run`], [`cmd_sweep`] and [`cmd_plot`].

pub mod config;
pub mod error;
pub mod exec;
pub mod output;
pub mod plot;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, LoadedConfig, Mode};
pub use error::CliError;
pub use exec::RunOptions;

use exec::{build, compare_one, engine_config, gf_config, guard_alpha, resolve_single, tau_end, CompareOutcome, Problem, Resolved};
use output::{
    fmt_f64, run_columns, write_compare, write_failures, write_json, write_run, write_sequence, write_spectrum, write_trace,
    Failure, RunMeta, RUN_SCHEMA, SWEEP_SCHEMA,
};

/// Where a finished command left its artifacts, plus a one-line summary.
#[derive(Debug, Clone)]
pub struct Summary {
    pub dir: PathBuf,
    pub message: String,
}

/// Output root: `--out`, then the config's `out`, then `AGF_OUT_DIR`, then `agf-out`.
pub fn out_root(lc: &LoadedConfig, opts: &RunOptions) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| lc.config.out.as_ref().map(|p| lc.resolve(p)))
        .or_else(|| opts.env_out.clone())
        .unwrap_or_else(|| PathBuf::from("agf-out"))
}

fn command_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Agf => "agf",
        Mode::Gf => "gf",
        Mode::Predict => "predict",
        Mode::Compare => "compare",
    }
}

/// Runs one experiment in `mode`; failures other than a failed comparison are
/// also recorded in `failures.json` in the run directory.
pub fn cmd_run(lc: &LoadedConfig, mode: Mode, opts: &RunOptions) -> Result<Summary, CliError> {
    let dir = out_root(lc, opts).join(lc.name());
    let (alpha, seed, result) = match resolve_single(lc, opts) {
        Ok(r) => {
            let res = std::fs::create_dir_all(&dir).map_err(CliError::from).and_then(|_| execute(lc, mode, &r, opts, &dir));
            (Some(r.alpha), Some(r.seed), res)
        }
        Err(e) => (None, None, Err(e)),
    };
    if let Err(e) = &result {
        if !matches!(e, CliError::Comparison(_)) {
            write_failures(&dir, &[Failure::new(&lc.path, command_name(mode), alpha, seed, e)])?;
        }
    }
    result.map(|message| Summary { dir, message })
}

fn run_meta(problem: &Problem, r: &Resolved, gf: &agf_core::GfConfig, run: &agf_core::GfRun, pred: Option<&agf_core::PredictedSequence>) -> RunMeta {
    RunMeta {
        schema: RUN_SCHEMA.into(),
        model: problem.model().into(),
        alpha: r.alpha,
        seed: r.seed,
        eta: run.eta,
        tau_end: gf.tau_end,
        integrator: gf.integrator,
        columns: run_columns(run),
        observable_targets: problem.observable_targets(),
        prediction: pred.cloned(),
        final_params: run.final_params.clone(),
    }
}

fn write_outcome(dir: &Path, problem: &Problem, r: &Resolved, o: &CompareOutcome) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    write_run(dir, &o.run, &run_meta(problem, r, &o.gf, &o.run, Some(&o.prediction)))?;
    write_sequence(dir, &o.prediction)?;
    if let Some(t) = &o.trace {
        write_trace(dir, t)?;
    }
    if let Problem::Modadd(p) = problem {
        write_spectrum(dir, p, &o.run.final_params)?;
    }
    write_compare(dir, &o.report, &o.order, o.pass())
}

fn execute(lc: &LoadedConfig, mode: Mode, r: &Resolved, opts: &RunOptions, dir: &Path) -> Result<String, CliError> {
    if matches!(mode, Mode::Gf | Mode::Compare) {
        guard_alpha(r.alpha, opts)?;
    }
    let problem = build(lc, r.alpha)?;
    match mode {
        Mode::Predict => {
            let pred = problem.predict()?;
            write_sequence(dir, &pred)?;
            let losses: Vec<String> = pred.steps.iter().map(|s| fmt_f64(s.loss)).collect();
            Ok(format!("predicted {} steps, losses [{}]", pred.steps.len(), losses.join(", ")))
        }
        Mode::Agf => {
            let trace = problem.agf(&engine_config(lc, r))?;
            write_trace(dir, &trace)?;
            let seq = agf_core::PredictedSequence::from_trace(&trace, problem.model());
            write_sequence(dir, &seq)?;
            Ok(format!("{} events, final loss {}", trace.events.len(), fmt_f64(seq.steps.last().map_or(trace.loss0, |s| s.loss))))
        }
        Mode::Gf => {
            let pred = problem.predict().ok();
            let tau = match &pred {
                Some(p) => tau_end(lc, p)?,
                None => lc.config.gf.tau_end.ok_or_else(|| lc.error_at(Some("gf"), "tau_end", "required when no prediction is available"))?,
            };
            let gf = gf_config(lc, r, tau, opts);
            let run = problem.gf(&gf)?;
            write_run(dir, &run, &run_meta(&problem, r, &gf, &run, pred.as_ref()))?;
            if let Problem::Modadd(p) = &problem {
                write_spectrum(dir, p, &run.final_params)?;
            }
            Ok(format!("{} samples to tau = {}, final loss {}", run.times.len(), fmt_f64(tau), fmt_f64(*run.losses.last().unwrap_or(&f64::NAN))))
        }
        Mode::Compare => {
            let o = compare_one(lc, &problem, r, opts)?;
            write_outcome(dir, &problem, r, &o)?;
            let msg = format!(
                "max loss err {:.3e}, max tau err {:.3e}, order {:?}",
                o.report.max_loss_err(),
                o.report.max_tau_err(),
                o.order.measured
            );
            if o.pass() {
                Ok(format!("PASS: {msg}"))
            } else {
                let failed: Vec<String> = o.report.rows.iter().filter(|r| !r.pass).map(|r| format!("k={} {}", r.k, r.note)).collect();
                let order = if o.order.pass { String::new() } else { format!("; {}", o.order.note) };
                Err(CliError::Comparison(format!("{msg}; failing rows: {}{order}", failed.join(", "))))
            }
        }
    }
}

/// One α of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub max_loss_err: f64,
    pub max_tau_err: f64,
    /// max(max_loss_err, max_tau_err).
    pub max_dev: f64,
    pub pass: bool,
    /// Learned feature order measured on the run.
    pub order: Vec<String>,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    /// Rows by decreasing α.
    pub rows: Vec<SweepRow>,
    /// Deviations strictly decrease as α decreases.
    pub monotone: bool,
    /// Every α learned features in the same order.
    pub order_consistent: bool,
    pub failures: Vec<Failure>,
}

/// Compare mode at every α of the config's `alphas`, run on a bounded pool.
pub fn cmd_sweep(lc: &LoadedConfig, opts: &RunOptions) -> Result<(Summary, SweepReport), CliError> {
    if opts.alpha.is_some() {
        return Err(CliError::Config("--alpha selects a single run; sweeps take the config's alphas".into()));
    }
    let mut alphas = lc.config.alphas.clone().unwrap_or_default();
    alphas.sort_by(|a, b| b.total_cmp(a));
    alphas.dedup();
    if alphas.len() < 2 {
        return Err(lc.error_at(None, "alphas", "a sweep needs at least two distinct values"));
    }
    for &a in &alphas {
        guard_alpha(a, opts)?;
    }
    let seed = opts.seed.unwrap_or(lc.config.seed);
    let root = out_root(lc, opts).join(lc.name());
    std::fs::create_dir_all(&root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("--workers: {e}")))?;
    let results: Vec<(f64, PathBuf, Result<CompareOutcome, CliError>)> = pool.install(|| {
        alphas
            .par_iter()
            .map(|&alpha| {
                let r = Resolved { alpha, seed };
                let dir = root.join(format!("alpha_{alpha:e}"));
                let out = build(lc, alpha).and_then(|p| {
                    let o = compare_one(lc, &p, &r, opts)?;
                    write_outcome(&dir, &p, &r, &o)?;
                    Ok(o)
                });
                (alpha, dir, out)
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut first_err = None;
    for (alpha, dir, res) in results {
        match res {
            Ok(o) => rows.push(SweepRow {
                alpha,
                max_loss_err: o.report.max_loss_err(),
                max_tau_err: o.report.max_tau_err(),
                max_dev: o.max_dev(),
                pass: o.pass(),
                order: o.order.measured.clone(),
                dir,
            }),
            Err(e) => {
                failures.push(Failure::new(&lc.path, "sweep", Some(alpha), Some(seed), &e));
                first_err.get_or_insert(e);
            }
        }
    }
    let monotone = rows.len() == alphas.len()
        && rows.windows(2).all(|w| w[1].max_dev < w[0].max_dev)
        && rows.last().is_some_and(|r| r.max_dev.is_finite());
    let order_consistent = rows.windows(2).all(|w| w[0].order == w[1].order);
    let report = SweepReport { schema: SWEEP_SCHEMA.into(), rows, monotone, order_consistent, failures };

    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(root.join("sweep.csv"))?;
    w.write_record(["alpha", "max_loss_err", "max_tau_err", "max_dev", "pass", "order"])?;
    for r in &report.rows {
        w.write_record([
            fmt_f64(r.alpha),
            fmt_f64(r.max_loss_err),
            fmt_f64(r.max_tau_err),
            fmt_f64(r.max_dev),
            r.pass.to_string(),
            r.order.join(" "),
        ])?;
    }
    w.flush()?;
    write_json(&root.join("sweep.json"), &report)?;
    if let Some(e) = first_err {
        write_failures(&root, &report.failures)?;
        return Err(e);
    }
    let devs: Vec<String> = report.rows.iter().map(|r| format!("{:e}: {:.3e}", r.alpha, r.max_dev)).collect();
    let message = format!(
        "deviations [{}], monotone {}, order consistent {}",
        devs.join(", "),
        report.monotone,
        report.order_consistent
    );
    Ok((Summary { dir: root, message }, report))
}

/// SVG figures for each run directory or run CSV.
pub fn cmd_plot(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    plot::plot_runs(inputs, out_dir)
}
