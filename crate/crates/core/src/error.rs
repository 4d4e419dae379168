use thiserror::Error;

use crate::checksum::Axis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbftError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{tag}: missing {axis:?} checksums required by {op}")]
    MissingChecksum { op: &'static str, tag: String, axis: Axis },

    #[error("checksum axis mismatch: stored {stored:?}, fresh {fresh:?}")]
    AxisMismatch { stored: Axis, fresh: Axis },

    #[error("element ({batch}, {head}, {row}, {col}) outside {site} of shape {shape}")]
    OutOfRange {
        site: String,
        batch: usize,
        head: usize,
        row: usize,
        col: usize,
        shape: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, AbftError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> AbftError {
    AbftError::Shape {
        op,
        detail: detail.into(),
    }
}
