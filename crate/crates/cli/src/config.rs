//! Experiment configuration: one TOML file per experiment.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dln,
    Fcln,
    Attn,
    Modadd,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dln => "dln",
            Self::Fcln => "fcln",
            Self::Attn => "attn",
            Self::Modadd => "modadd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Agf,
    Gf,
    Predict,
    Compare,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name; defaults to the config file stem.
    pub name: Option<String>,
    pub model: ModelKind,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub alpha: Option<f64>,
    /// α list for sweeps.
    pub alphas: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dln: Option<DlnSpec>,
    pub fcln: Option<FclnSpec>,
    pub attn: Option<AttnSpec>,
    pub modadd: Option<ModaddSpec>,
    #[serde(default)]
    pub gf: GfSpec,
    #[serde(default)]
    pub engine: EngineSpec,
    #[serde(default)]
    pub compare: CompareSpec,
}

fn default_mode() -> Mode {
    Mode::Compare
}

/// Exactly one of `x`/`y`, `x_file`/`y_file`, `two_coordinate` or `random`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DlnSpec {
    /// Rows are features: x[i][j] is feature i of sample j.
    pub x: Option<Vec<Vec<f64>>>,
    pub y: Option<Vec<f64>>,
    /// Matrix text files, resolved relative to the config file.
    pub x_file: Option<PathBuf>,
    pub y_file: Option<PathBuf>,
    #[serde(default)]
    pub two_coordinate: bool,
    pub random: Option<RandomDln>,
}

/// Gaussian X (d×n) and y with unit-variance entries.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomDln {
    pub d: usize,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Exactly one of `diagonal`, `power_law` or `sigma_xx`/`sigma_yx`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FclnSpec {
    pub hidden: usize,
    pub diagonal: Option<Vec<f64>>,
    pub power_law: Option<PowerLawFcln>,
    pub sigma_xx: Option<Vec<Vec<f64>>>,
    pub sigma_yx: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLawFcln {
    pub c: usize,
    pub d: usize,
    pub exponent: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Exactly one of `eigenvalues`, `power_law` or `sigma_xx`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnSpec {
    pub heads: usize,
    pub n_ctx: usize,
    pub eigenvalues: Option<Vec<f64>>,
    pub power_law: Option<PowerLawAttn>,
    pub sigma_xx: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLawAttn {
    pub d: usize,
    pub exponent: f64,
}

/// Exactly one of `spectrum` (frequency, magnitude, phase) or `x`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModaddSpec {
    pub p: usize,
    pub hidden: usize,
    pub spectrum: Option<Vec<(usize, f64, f64)>>,
    pub x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rkc,
    Rk45,
    Rk4,
    Descent,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfSpec {
    /// Final accelerated time; defaults to 1.5× the last predicted jump time.
    pub tau_end: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    /// Step for `rk4` and `descent` (accelerated units).
    pub dt: Option<f64>,
}

fn default_samples() -> usize {
    2000
}
fn default_method() -> Method {
    Method::Rkc
}
fn default_atol() -> f64 {
    1e-10
}
fn default_rtol() -> f64 {
    1e-7
}

impl Default for GfSpec {
    fn default() -> Self {
        Self {
            tau_end: None,
            samples: default_samples(),
            method: default_method(),
            atol: default_atol(),
            rtol: default_rtol(),
            dt: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSpec {
    pub t_max: Option<f64>,
    pub batch_window: Option<f64>,
    pub max_events: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// Plateau extraction from the curve alone.
    Extract,
    /// Read levels and drops where the prediction says to look.
    Probe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    /// Closed-form or analytic predictor.
    Predict,
    /// Sequence produced by the AGF engine.
    Agf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    #[serde(default = "default_loss_rel")]
    pub loss_rel: f64,
    #[serde(default = "default_tau_rel")]
    pub tau_rel: f64,
    #[serde(default = "default_zero_floor")]
    pub zero_floor: f64,
    #[serde(default = "default_measure")]
    pub measure: Measure,
    #[serde(default = "default_reference")]
    pub reference: Reference,
    #[serde(default = "default_slope_rel")]
    pub slope_rel: f64,
    #[serde(default = "default_min_duration_frac")]
    pub min_duration_frac: f64,
}

fn default_loss_rel() -> f64 {
    0.05
}
fn default_tau_rel() -> f64 {
    0.10
}
fn default_zero_floor() -> f64 {
    1e-2
}
fn default_measure() -> Measure {
    Measure::Extract
}
fn default_reference() -> Reference {
    Reference::Predict
}
fn default_slope_rel() -> f64 {
    1e-3
}
fn default_min_duration_frac() -> f64 {
    0.02
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            loss_rel: default_loss_rel(),
            tau_rel: default_tau_rel(),
            zero_floor: default_zero_floor(),
            measure: default_measure(),
            reference: default_reference(),
            slope_rel: default_slope_rel(),
            min_duration_frac: default_min_duration_frac(),
        }
    }
}

/// A parsed config together with its source, for locating semantic errors.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    pub source: String,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: cannot read: {e}", path.display())))?;
        Self::parse(&source, path)
    }

    pub fn parse(source: &str, path: &Path) -> Result<Self, CliError> {
        let config: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let at = e.span().map(|s| line_col(source, s.start)).map_or(String::new(), |(l, c)| format!(":{l}:{c}"));
            CliError::Config(format!("{}{at}: {}", path.display(), e.message()))
        })?;
        let loaded = Self { config, path: path.to_path_buf(), source: source.to_string() };
        loaded.validate()?;
        Ok(loaded)
    }

    /// Run name: the `name` key, else the file stem.
    pub fn name(&self) -> String {
        self.config.name.clone().unwrap_or_else(|| {
            self.path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
        })
    }

    /// Resolves a path given in the config relative to the config's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    /// Config error pointing at `key` (inside `[section]` if given).
    pub fn error_at(&self, section: Option<&str>, key: &str, msg: impl std::fmt::Display) -> CliError {
        let at = find_key(&self.source, section, key).map_or(String::new(), |l| format!(":{l}"));
        CliError::Config(format!("{}{at}: {key}: {msg}", self.path.display()))
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        for (a, k) in c.alpha.iter().map(|a| (a, "alpha")).chain(c.alphas.iter().flatten().map(|a| (a, "alphas"))) {
            if !(a.is_finite() && *a > 0.0) {
                return Err(self.error_at(None, k, format!("must be positive and finite, got {a}")));
            }
        }
        if c.alpha.is_none() && c.alphas.as_ref().is_none_or(|v| v.is_empty()) {
            return Err(self.error_at(None, "model", "one of alpha or alphas is required"));
        }
        let name = c.model.name();
        let present = [("dln", c.dln.is_some()), ("fcln", c.fcln.is_some()), ("attn", c.attn.is_some()), ("modadd", c.modadd.is_some())];
        for (sec, there) in present {
            if there && sec != name {
                return Err(self.error_at(None, &format!("[{sec}]"), format!("section does not match model = \"{name}\"")));
            }
        }
        let one_of = |sec: &str, count: usize, what: &str| {
            if count == 1 {
                Ok(())
            } else {
                Err(self.error_at(None, &format!("[{sec}]"), format!("exactly one of {what} is required")))
            }
        };
        match c.model {
            ModelKind::Dln => {
                let d = c.dln.clone().unwrap_or_default();
                let n = [d.x.is_some() || d.y.is_some(), d.x_file.is_some() || d.y_file.is_some(), d.two_coordinate, d.random.is_some()]
                    .iter()
                    .filter(|b| **b)
                    .count();
                let n = if c.dln.is_none() { 0 } else { n };
                one_of("dln", n, "x/y, x_file/y_file, two_coordinate, random")?;
                if d.x.is_some() != d.y.is_some() {
                    return Err(self.error_at(Some("dln"), if d.x.is_some() { "x" } else { "y" }, "x and y go together"));
                }
                if d.x_file.is_some() != d.y_file.is_some() {
                    return Err(self.error_at(Some("dln"), if d.x_file.is_some() { "x_file" } else { "y_file" }, "x_file and y_file go together"));
                }
            }
            ModelKind::Fcln => {
                let Some(f) = &c.fcln else { return one_of("fcln", 0, "diagonal, power_law, sigma_xx/sigma_yx") };
                let n = [f.diagonal.is_some(), f.power_law.is_some(), f.sigma_xx.is_some() || f.sigma_yx.is_some()]
                    .iter()
                    .filter(|b| **b)
                    .count();
                one_of("fcln", n, "diagonal, power_law, sigma_xx/sigma_yx")?;
                if f.sigma_xx.is_some() != f.sigma_yx.is_some() {
                    return Err(self.error_at(Some("fcln"), "sigma_xx", "sigma_xx and sigma_yx go together"));
                }
                if f.hidden == 0 {
                    return Err(self.error_at(Some("fcln"), "hidden", "must be at least 1"));
                }
            }
            ModelKind::Attn => {
                let Some(a) = &c.attn else { return one_of("attn", 0, "eigenvalues, power_law, sigma_xx") };
                let n = [a.eigenvalues.is_some(), a.power_law.is_some(), a.sigma_xx.is_some()].iter().filter(|b| **b).count();
                one_of("attn", n, "eigenvalues, power_law, sigma_xx")?;
                if a.heads == 0 {
                    return Err(self.error_at(Some("attn"), "heads", "must be at least 1"));
                }
                if a.n_ctx == 0 {
                    return Err(self.error_at(Some("attn"), "n_ctx", "must be at least 1"));
                }
            }
            ModelKind::Modadd => {
                let Some(m) = &c.modadd else { return one_of("modadd", 0, "spectrum, x") };
                one_of("modadd", [m.spectrum.is_some(), m.x.is_some()].iter().filter(|b| **b).count(), "spectrum, x")?;
                if m.p < 3 {
                    return Err(self.error_at(Some("modadd"), "p", "must be at least 3"));
                }
                if m.hidden == 0 {
                    return Err(self.error_at(Some("modadd"), "hidden", "must be at least 1"));
                }
            }
        }
        let g = &c.gf;
        if let Some(t) = g.tau_end {
            if !(t.is_finite() && t > 0.0) {
                return Err(self.error_at(Some("gf"), "tau_end", "must be positive"));
            }
        }
        if g.samples < 2 {
            return Err(self.error_at(Some("gf"), "samples", "must be at least 2"));
        }
        if !(g.atol > 0.0 && g.rtol > 0.0) {
            return Err(self.error_at(Some("gf"), "atol", "tolerances must be positive"));
        }
        if let Some(dt) = g.dt {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(self.error_at(Some("gf"), "dt", "must be positive"));
            }
        }
        let t = &c.compare;
        if !(t.loss_rel > 0.0 && t.tau_rel > 0.0 && t.zero_floor >= 0.0) {
            return Err(self.error_at(Some("compare"), "loss_rel", "tolerances must be positive"));
        }
        Ok(())
    }
}

/// 1-based (line, column) of a byte offset.
fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

/// 1-based line of `key = …` (or of a `[key]` header when `key` is bracketed).
fn find_key(src: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            if line == key {
                return Some(i + 1);
            }
            current = Some(line.trim_matches(|c| c == '[' || c == ']').trim().to_string());
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        if k.trim() == key && current.as_deref() == section {
            return Some(i + 1);
        }
    }
    None
}

/// Reads a whitespace-separated numeric matrix; `#` starts a comment.
pub fn read_matrix_text(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: cannot read: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| CliError::Config(format!("{}:{}: not a number: {t}", path.display(), i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        if rows.first().is_some_and(|r: &Vec<f64>| r.len() != row.len()) {
            return Err(CliError::Config(format!("{}:{}: ragged row", path.display(), i + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}
