use std::path::PathBuf;

/// Error type shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("pose error: {0}")]
    Pose(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("missing model component: {0}")]
    MissingComponent(&'static str),
    #[error("checkpoint fingerprint mismatch: archive {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("corrupt checkpoint archive: {0}")]
    CorruptArchive(String),
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
