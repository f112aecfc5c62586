use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the stylization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid layer range [{lo}, {hi}] for a latent with {layers} layers")]
    Range { lo: usize, hi: usize, layers: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pose estimation failed: {0}")]
    PoseEstimation(String),

    #[error("{stage} diverged at step {step}: non-finite loss")]
    Divergence { stage: Stage, step: usize },

    #[error("degenerate direction (norm {norm:e} below threshold)")]
    DegenerateDirection { norm: f64 },

    #[error("token {0:?} is not in the embedder vocabulary")]
    Vocabulary(String),

    #[error("incompatible or corrupted artifact {path}: {reason}")]
    Incompatible { path: PathBuf, reason: String },

    #[error("capability unavailable: {0}")]
    Unavailable(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage, used to label divergence reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Inversion,
    Apt,
    Ite,
    Pti,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Inversion => "inversion",
            Stage::Apt => "apt",
            Stage::Ite => "ite",
            Stage::Pti => "pti",
        };
        f.write_str(name)
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn incompatible(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Incompatible {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
