use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch { op: String, shapes: Vec<Vec<usize>> },

    #[error("unknown operation tag `{0}`")]
    UnknownOp(String),

    #[error("tensor has {len} elements but shape {shape:?} needs {expected}")]
    BadLength {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor is not recorded on this graph")]
    ForeignNode,

    #[error("parameter length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value {value} at index {index} in {context}")]
    NonFinite {
        context: String,
        index: usize,
        value: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid distortion: {0}")]
    InvalidSpec(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed {format}: {reason}")]
    Format { format: &'static str, reason: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_finite(context: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}
