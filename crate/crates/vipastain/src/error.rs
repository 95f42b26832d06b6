use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants carry enough context to name the failing
/// object, path or grid cell in CLI output.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("could not place {object}: no free position after {attempts} attempts on a {canvas}px canvas")]
    Placement {
        object: String,
        attempts: u32,
        canvas: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("degenerate histogram: {populated} populated bins, need at least {needed} for {k} thresholds")]
    DegenerateHistogram {
        populated: usize,
        needed: usize,
        k: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stitch coverage gap: missing grid cells {0:?}")]
    CoverageGap(Vec<(u32, u32)>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, err: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
