use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ClipError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ClipError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid safetensors file: {0}")]
    SafeTensors(#[from] safetensors::SafeTensorError),

    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected}")]
    BadShape { name: String, actual: Vec<usize>, expected: String },

    #[error("unsupported tensor dtype {dtype} for `{name}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("cannot infer model architecture: {0}")]
    Architecture(String),

    #[error("prompt needs {tokens} tokens but the text encoder accepts at most {limit}")]
    PromptTooLong { tokens: usize, limit: usize },

    #[error("token id {id} is outside the model vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("tokenizer vocabulary is invalid: {0}")]
    Vocabulary(String),

    #[error("image has zero width or height")]
    EmptyImage,

    #[error("no tokenizer attached to this model")]
    NoTokenizer,

    #[error("activation shape {actual:?} does not match captured shape {expected:?}")]
    ActivationShape { actual: Vec<usize>, expected: Vec<usize> },
}
