use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies at or behind the camera center (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("direction is parallel to the optical axis")]
    DegenerateDirection,
    #[error("strand has zero arc length or fewer than two vertices")]
    DegenerateStrand,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no ray of any view intersects the hair bounding box")]
    EmptyVolume,
    #[error("no admissible seed volume between inner and outer mesh")]
    NoAdmissibleVolume,
    #[error("numerical divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },
    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("bad {format} data: {msg}")]
    Format { format: &'static str, msg: String },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(format: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            format,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
