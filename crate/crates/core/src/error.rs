use thiserror::Error;

/// Errors raised by the model, simulators and solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input failed validation. `key` names the offending field.
    #[error("invalid {key}: {reason}")]
    Validation { key: String, reason: String },

    /// A function was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The time step is too large for the explicit parts of a scheme.
    #[error("CFL violation: dt = {dt:e} exceeds the admissible {max_dt:e}")]
    Cfl { dt: f64, max_dt: f64 },

    /// A solver produced non-finite or strongly negative values.
    #[error("solver failure at step {step} ({term}): {reason}")]
    Solver { step: usize, term: &'static str, reason: String },

    /// A caller broke an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(String),

    /// A failure inside one task of a batch, with what reproduces it.
    #[error("{task} (seed {seed}): {source}")]
    Task { task: String, seed: u64, source: Box<Error> },
}

impl Error {
    pub fn validation(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation { key: key.into(), reason: reason.into() }
    }

    /// The underlying error of a task failure.
    pub fn root(&self) -> &Error {
        match self {
            Error::Task { source, .. } => source.root(),
            e => e,
        }
    }

    /// Input problems (bad keys, domains, grids) as opposed to failures of
    /// a running solver.
    pub fn is_input(&self) -> bool {
        matches!(self.root(), Error::Validation { .. } | Error::Domain(_) | Error::Cfl { .. } | Error::Contract(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::validation("config", e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
