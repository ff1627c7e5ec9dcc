//! On-disk artifacts. Every CSV has a header row, LF line endings and floats
//! in shortest round-trip form; see SCHEMA.md for the columns.

use std::fs;
use std::path::{Path, PathBuf};

use agf_core::{AgfTrace, CompareReport, EventKind, GfRun, PredictedSequence};
use serde::Serialize;

use crate::error::CliError;
use crate::exec::OrderCheck;

pub const RUN_SCHEMA: &str = "agf-run/1";
pub const SEQUENCE_SCHEMA: &str = "agf-sequence/1";
pub const TRACE_SCHEMA: &str = "agf-trace/1";
pub const COMPARE_SCHEMA: &str = "agf-compare/1";
pub const SWEEP_SCHEMA: &str = "agf-sweep/1";
pub const FAILURE_SCHEMA: &str = "agf-failure/1";

/// Shortest string that parses back to the same f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), fmt_f64)
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Sidecar describing a gradient-flow run.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct RunMeta {
    pub schema: String,
    pub model: String,
    pub alpha: f64,
    pub seed: u64,
    pub eta: f64,
    pub tau_end: f64,
    pub integrator: agf_core::GfIntegrator,
    pub columns: Vec<String>,
    /// Limiting observable values, drawn as reference lines.
    pub observable_targets: Vec<(String, f64)>,
    pub prediction: Option<PredictedSequence>,
    pub final_params: Vec<f64>,
}

pub fn run_columns(run: &GfRun) -> Vec<String> {
    ["tau", "t_raw", "loss"].iter().map(|s| s.to_string()).chain(run.observable_names.iter().cloned()).collect()
}

pub fn write_run(dir: &Path, run: &GfRun, meta: &RunMeta) -> Result<(), CliError> {
    let mut w = writer(&dir.join("run.csv"))?;
    w.write_record(&meta.columns)?;
    for i in 0..run.times.len() {
        let mut row = vec![fmt_f64(run.times[i]), fmt_f64(run.raw_times[i]), fmt_f64(run.losses[i])];
        row.extend(run.observables[i].iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    write_json(&dir.join("run.json"), meta)
}

pub fn write_sequence(dir: &Path, pred: &PredictedSequence) -> Result<(), CliError> {
    let mut w = writer(&dir.join("sequence.csv"))?;
    w.write_record(["k", "loss", "tau", "tau_lower_bound", "feature", "value"])?;
    for s in &pred.steps {
        w.write_record([s.k.to_string(), fmt_f64(s.loss), opt(s.tau), opt(s.tau_lower_bound), s.feature.clone(), fmt_f64(s.value)])?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Doc<'a> {
        schema: &'a str,
        order: Vec<&'a str>,
        #[serde(flatten)]
        sequence: &'a PredictedSequence,
    }
    let order = pred.steps.iter().skip(1).map(|s| s.feature.as_str()).collect();
    write_json(&dir.join("sequence.json"), &Doc { schema: SEQUENCE_SCHEMA, order, sequence: pred })
}

pub fn write_trace(dir: &Path, trace: &AgfTrace) -> Result<(), CliError> {
    let mut w = writer(&dir.join("trace.csv"))?;
    w.write_record(["kind", "neuron", "tau", "loss_after", "group", "max_dormant_norm"])?;
    for e in &trace.events {
        let kind = match e.kind {
            EventKind::Activation => "activation",
            EventKind::Collapse => "collapse",
            EventKind::Termination => "termination",
        };
        let group: Vec<String> = e.group.iter().map(|g| g.to_string()).collect();
        w.write_record([
            kind.to_string(),
            e.neuron.to_string(),
            fmt_f64(e.tau),
            fmt_f64(e.loss_after),
            group.join(" "),
            fmt_f64(e.max_dormant_norm),
        ])?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Doc<'a> {
        schema: &'a str,
        trace: &'a AgfTrace,
    }
    write_json(&dir.join("trace.json"), &Doc { schema: TRACE_SCHEMA, trace })
}

pub fn write_compare(dir: &Path, report: &CompareReport, order: &OrderCheck, pass: bool) -> Result<(), CliError> {
    let mut w = writer(&dir.join("compare.csv"))?;
    w.write_record([
        "k",
        "predicted_loss",
        "measured_loss",
        "loss_err",
        "predicted_tau",
        "tau_is_bound",
        "measured_tau",
        "tau_err",
        "pass",
        "note",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.k.to_string(),
            fmt_f64(r.predicted_loss),
            opt(r.measured_loss),
            opt(r.loss_err),
            opt(r.predicted_tau),
            r.tau_is_bound.to_string(),
            opt(r.measured_tau),
            opt(r.tau_err),
            r.pass.to_string(),
            r.note.clone(),
        ])?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Doc<'a> {
        schema: &'a str,
        pass: bool,
        report: &'a CompareReport,
        feature_order: &'a OrderCheck,
    }
    write_json(&dir.join("compare.json"), &Doc { schema: COMPARE_SCHEMA, pass, report, feature_order: order })
}

/// Per-neuron spectrum of a trained modular-addition network.
pub fn write_spectrum(dir: &Path, prob: &agf_core::models::modadd::ModAddProblem, params: &[f64]) -> Result<(), CliError> {
    let spec = agf_core::models::modadd::spectrum_probe(prob, params);
    let mut w = writer(&dir.join("spectrum.csv"))?;
    let mut header: Vec<String> = ["neuron", "norm", "dominant", "phase_w", "phase_u", "phase_v"].iter().map(|s| s.to_string()).collect();
    header.extend((0..=prob.p / 2).map(|k| format!("power_{k}")));
    w.write_record(&header)?;
    for (i, (s, th)) in spec.iter().zip(params.chunks(3 * prob.p)).enumerate() {
        let norm = th.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut row =
            vec![i.to_string(), fmt_f64(norm), s.dominant.to_string(), fmt_f64(s.phase_w), fmt_f64(s.phase_u), fmt_f64(s.phase_v)];
        row.extend(s.power.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Failure {
    pub schema: String,
    pub config: PathBuf,
    pub command: String,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub kind: String,
    pub exit_code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(config: &Path, command: &str, alpha: Option<f64>, seed: Option<u64>, err: &CliError) -> Self {
        Self {
            schema: FAILURE_SCHEMA.into(),
            config: config.to_path_buf(),
            command: command.into(),
            alpha,
            seed,
            kind: err.kind().into(),
            exit_code: err.exit_code(),
            message: err.to_string(),
        }
    }
}

/// Records failed runs in `failures.json`.
pub fn write_failures(dir: &Path, failures: &[Failure]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("failures.json"), &failures)
}

/// Reads a run CSV back: (columns, rows).
pub fn read_run_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| CliError::SchemaMismatch(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::SchemaMismatch(format!("{}: {e}", path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.len() < 3 || header[..3] != ["tau", "t_raw", "loss"] {
        return Err(CliError::SchemaMismatch(format!("{}: header must start with tau,t_raw,loss", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::SchemaMismatch(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| CliError::SchemaMismatch(format!("{}: row {}: not a number: {f}", path.display(), i + 2)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}
