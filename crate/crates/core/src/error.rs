use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A rank condition required by the operation does not hold.
    #[error("rank deficiency: {condition} (required rank {required}, found {found})")]
    RankDeficient {
        condition: String,
        required: usize,
        found: usize,
    },

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("inconsistent initial state: ‖Φ‖ = {residual:e} after {iterations} iterations")]
    InconsistentInitialState { residual: f64, iterations: usize },

    /// The integrator produced a non-finite state. `last_good` holds `[t, q.., q̇..]`.
    #[error("divergence at step {step} (t = {t}): {reason}")]
    Divergence {
        step: usize,
        t: f64,
        reason: String,
        last_good: Vec<f64>,
    },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown system {0:?}")]
    UnknownSystem(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ (Error::Divergence { .. } | Error::AtStep { .. }) => e,
            other => Error::AtStep {
                step,
                source: Box::new(other),
            },
        }
    }
}
