use thiserror::Error;

/// Errors raised across the gait-synthesis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("not an impact: {0}")]
    NotAnImpact(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got} ({what})")]
    Shape {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("integrator step size collapsed at t = {t:.6e} s (h = {h:.3e})")]
    Stiffness { t: f64, h: f64 },

    #[error("non-finite state at t = {t:.6e} s")]
    Divergence { t: f64 },

    #[error("step failed: {reason}")]
    StepFailure {
        reason: String,
        /// Number of samples recorded before the failure.
        samples: usize,
    },

    #[error("degenerate virtual constraint: {0}")]
    Degenerate(String),

    #[error("stability undetermined: {0}")]
    StabilityUndetermined(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file at byte {offset}: {message}")]
    Corruption { offset: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable snake_case name of the variant, for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParams(_) => "invalid_params",
            Error::InvalidState(_) => "invalid_state",
            Error::Singular(_) => "singular",
            Error::NotAnImpact(_) => "not_an_impact",
            Error::Domain(_) => "domain",
            Error::Shape { .. } => "shape",
            Error::Stiffness { .. } => "stiffness",
            Error::Divergence { .. } => "divergence",
            Error::StepFailure { .. } => "step_failure",
            Error::Degenerate(_) => "degenerate",
            Error::StabilityUndetermined(_) => "stability_undetermined",
            Error::Format(_) => "format",
            Error::Corruption { .. } => "corruption",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Shape {
            what: what.into(),
            expected,
            got,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
