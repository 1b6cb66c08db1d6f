use thiserror::Error;

#[derive(Debug, Error)]
pub enum FssError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("mask has no foreground after downsampling to {height}x{width}")]
    DegenerateMask { height: usize, width: usize },
    #[error("class {class_id} has {available} records, need at least {required}")]
    Sampling { class_id: u32, available: usize, required: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("manifest error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = FssError> = std::result::Result<T, E>;
