use thiserror::Error;

pub type Result<T, E = DcicError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DcicError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("encode error: {0}")]
    Encode(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("bitstream parse error: {0}")]
    Parse(String),

    #[error("model mismatch: bitstream expects model {expected}, loaded model is {actual}")]
    ModelMismatch { expected: String, actual: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
