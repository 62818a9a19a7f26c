use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?} ({context})")]
    Dimension {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("category {got} out of range for {classes} classes")]
    Category { got: usize, classes: usize },
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("spatial index is empty")]
    EmptyIndex,
    #[error("empty scene: no observed or occluded voxels")]
    EmptyScene,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("schedule: iteration {iter} beyond horizon {max_iter}")]
    Schedule { iter: usize, max_iter: usize },
    #[error("optimizer: parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numeric failure at iteration {iter}: {what}")]
    Numeric { iter: usize, what: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Whether the error originates from reading or validating input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Version { .. }
                | Error::Truncated { .. }
                | Error::Malformed(_)
                | Error::Checkpoint(_)
                | Error::Io(_)
                | Error::EmptyScene
                | Error::EmptyCloud
                | Error::Spec(_)
        )
    }
}
