use std::path::PathBuf;

/// Errors raised anywhere in the simulator, estimators, or model stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("batch norm in train mode needs at least 2 samples per channel, got batch of {0}")]
    DegenerateBatch(usize),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("NMSE undefined: true channel for link (ap {ap}, ue {ue}) has zero norm")]
    MetricUndefined { ap: usize, ue: usize },
    #[error("ill-conditioned probe: condition number {0:.3e}")]
    IllConditioned(f64),
    #[error("step {step} out of range 1..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
