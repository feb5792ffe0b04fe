use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate space mismatch: {0} vs {1}")]
    CoordSpaceMismatch(String, String),

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("transform collapses box {0:?} to zero area")]
    DegenerateTransform([i64; 4]),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown instance id `{0}`")]
    UnknownInstance(String),

    #[error("report structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("missing CoT text for scene `{scene_id}` target {target}")]
    MissingCot { scene_id: String, target: usize },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("image `{path}`: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad input data rather than bad arguments
    /// or broken internal state.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidBox(_)
                | Error::DegenerateTransform(_)
                | Error::CoordSpaceMismatch(..)
                | Error::UnknownInstance(_)
                | Error::StructureMismatch(_)
                | Error::MissingCot { .. }
                | Error::Manifest { .. }
                | Error::Image { .. }
                | Error::Io(_)
                | Error::Json(_)
        )
    }

    pub fn is_invariant_violation(&self) -> bool {
        matches!(self, Error::Invariant(_) | Error::NonFinite(_))
    }
}
