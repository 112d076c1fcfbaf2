use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("character {ch:?} at position {position} is not in the alphabet")]
    OutOfAlphabet { ch: char, position: usize },

    #[error("label id {0} is not a valid grapheme id")]
    InvalidLabel(usize),

    #[error("instance too large for exhaustive enumeration: {0}")]
    InstanceTooLarge(String),

    #[error("target of length {target_len} needs at least {required} frames, got {frames}")]
    InfeasibleTarget {
        target_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {}: {message}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<memory>".into()))]
    Format { path: Option<PathBuf>, message: String },

    #[error("cache does not match the gradient being propagated: {0}")]
    StaleCache(String),

    #[error("cannot train a language model on an empty corpus")]
    EmptyCorpus,

    #[error("reference transcript is empty")]
    EmptyReference,

    #[error("malformed manifest record at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("data error ({message}); offending utterances: {}", ids.join(", "))]
    Data { message: String, ids: Vec<String> },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(message: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            message: message.into(),
        }
    }

    pub(crate) fn with_path(self, path: &std::path::Path) -> Self {
        match self {
            Error::Format { message, .. } => Error::Format {
                path: Some(path.to_path_buf()),
                message,
            },
            other => other,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
