use thiserror::Error;
use tvc_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("bitstream format: {0}")]
    Format(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("entropy coding: {0}")]
    Entropy(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CodecError {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            CodecError::Format(_) | CodecError::Entropy(_) => 2,
            CodecError::Tensor(TensorError::Format(_)) => 2,
            CodecError::ModelMismatch(_) | CodecError::Tensor(TensorError::UnknownParam(_)) => 3,
            CodecError::Numeric(_) | CodecError::Tensor(TensorError::NonFinite(_)) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CodecError>;
