use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MdcError>;

#[derive(Debug, Error)]
pub enum MdcError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image too small: {0}")]
    ImageTooSmall(String),

    #[error("corrupt description: {0}")]
    CorruptDescription(String),

    #[error("entropy model checksum mismatch: stream {stream:#010x}, model {model:#010x}")]
    ModelMismatch { stream: u32, model: u32 },

    #[error("descriptions do not belong to the same image: {0}")]
    HeaderMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("plot error: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MdcError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MdcError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MdcError::InvalidArgument(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        MdcError::CorruptDescription(msg.into())
    }
}
