use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("logSNR shift underflows alpha_bar at step {t}")]
    ShiftUnderflow { t: usize },

    #[error("expansion factor is non-positive at step {t} (lambda = {lambda})")]
    NonPositiveFactor { t: usize, lambda: f64 },

    #[error("suppression reverses the diagonal factor at patch {patch}, step {t}: S = {s} >= f = {f}")]
    SignReversingSuppression { patch: usize, t: usize, s: f64, f: f64 },

    #[error("bisection failed to bracket a root: {0}")]
    NoBracket(String),

    #[error("contraction factor {kappa} >= 1 at position {index}; bound undefined")]
    NotContractive { index: usize, kappa: f64 },

    #[error("patch {0} not present in suppression table")]
    MissingPatch(usize),

    #[error("statistic undefined: {0}")]
    Undefined(String),

    #[error("equalisation theorem is vacuous for T = {steps} < 3")]
    EqualisationExempt { steps: usize },

    #[error("flow-matching contraction condition fails at step {step} (t = {t}): {reason}")]
    FlowMatchingViolated { step: usize, t: f64, reason: String },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: u64, message: String },

    #[error("malformed dataset {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by the filesystem rather than by the inputs' content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
