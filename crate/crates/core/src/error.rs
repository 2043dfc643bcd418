use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("incompatible Neumann data: |boundary integral| = {integral:.3e} exceeds {limit:.3e}")]
    IncompatibleNeumann { integral: f64, limit: f64 },

    #[error("conjugate gradient stopped after {iterations} iterations with relative residual {residual:.3e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: usize },

    #[error("shape sampling gave up after {0} rejected attempts")]
    SamplingExhausted(usize),

    #[error("sample {sample}: {source}")]
    Record {
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed {kind}: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::ShapeMismatch(_) => ErrorKind::Config,
            Error::Io(_) | Error::Format { .. } => ErrorKind::Io,
            Error::Record { source, .. } | Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage { stage: stage.into(), source: Box::new(self) }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
