use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("classes without any sample: {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("classifier weight for class {0} has zero norm")]
    ZeroNormWeight(usize),

    #[error("annotation rejected: {0}")]
    Annotation(String),

    #[error("checkpoint tensor `{tensor}`: {reason}")]
    Checkpoint { tensor: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Whether this error comes from bad configuration rather than a runtime fault.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Invalid(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
