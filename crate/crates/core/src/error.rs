use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum AgfError {
    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: f64 },
    #[error("adaptive step underflow at t = {t} (dt = {dt:e})")]
    StepUnderflow { t: f64, dt: f64 },
    #[error("step budget of {0} exhausted")]
    StepBudget(usize),
    #[error("no event before t_max = {t_max}")]
    NoEvent { t_max: f64 },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("initial norm {0} outside (0, 1)")]
    BadNorm(f64),
    #[error("norm reconstruction blew up (base {0:e} <= 0)")]
    Blowup(f64),
    #[error("utility phase stalled: no dormant neuron crossed its threshold by t = {t}")]
    Stalled { t: f64 },
    #[error("cost phase did not converge: gradient norm {grad_norm:e} after t = {t}")]
    NoConverge { t: f64, grad_norm: f64 },
    #[error("singular least-squares subproblem on coordinates {0:?}")]
    Singular(Vec<usize>),
    #[error("input covariance is not invertible")]
    SingularSigma,
    #[error("all dormant gradients vanish")]
    AllZeroGrad,
    #[error("group size {0} cannot attain the lower bound (need N >= 6)")]
    LowerBoundUnattainable(usize),
    #[error("template has no energy at frequency {0}")]
    ZeroCoefficient(usize),
    #[error("removed frequency set is not closed under negation (k = {0})")]
    NonSymmetricRemoval(usize),
    #[error("frequencies {0} and {1} have equal magnitude; order is undefined")]
    TieBreak(usize, usize),
    #[error("degenerate spectrum: gap {0:e} below floor")]
    DegenerateSpectrum(f64),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AgfError>;
