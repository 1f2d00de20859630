use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in {what}")]
    NonFinite { op: String, what: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("optimizer: parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("quantize: value {value} outside [0, 1]")]
    OutOfUnitRange { value: f64 },

    #[error("quantize: bit-width {0} outside 1..=32")]
    BitWidth(u32),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error("training diverged at {phase} epoch {epoch} step {step}: loss is {loss}")]
    Diverged {
        phase: String,
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
