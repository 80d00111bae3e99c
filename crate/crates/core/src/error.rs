use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("degenerate point set: {0}")]
    Degenerate(String),
    #[error("weights for `{model}` not found at {path} (offline mode)")]
    MissingWeights { model: String, path: PathBuf },
    #[error("could not fetch weights for `{model}` from {url}: {reason}")]
    Download { model: String, url: String, reason: String },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("model: {0}")]
    Model(#[from] bkprobe_clip::ClipError),
    #[error("missing inputs: {}", .0.join(", "))]
    MissingInputs(Vec<String>),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Npz(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True when the failure comes from the environment (weights, inputs,
    /// filesystem) rather than from a single trial.
    pub fn is_environment(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Image { .. }
                | Error::Json { .. }
                | Error::MissingWeights { .. }
                | Error::Download { .. }
                | Error::UnknownModel(_)
                | Error::MissingInputs(_)
                | Error::Config(_)
        )
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_owned(), source })
}
