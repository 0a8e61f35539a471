//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A NaN or infinity reached a point where it must not pass silently
    /// (loss evaluation, optimizer step, image emission).
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The weighted attention mask of the rendering loss sums to zero for a
    /// sample, which would divide by zero.
    #[error("rendering loss: weighted mask sums to zero for sample {sample}")]
    DegenerateMask { sample: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("checkpoint: tensor {name}: shape mismatch: checkpoint has {found:?}, live model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: truncated blob: need {need} bytes, have {have}")]
    TruncatedBlob { need: usize, have: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for dimension errors.
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
