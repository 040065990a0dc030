use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("caption is empty after tokenization")]
    EmptyCaption,
    #[error("corpus is empty")]
    CorpusEmpty,
    #[error("id {id} is outside the vocabulary (size {size})")]
    UnknownId { id: u32, size: usize },
    #[error("index {index} out of range for length {len}")]
    IndexError { index: usize, len: usize },
    #[error("sequence of length {len} is shorter than kernel {kernel}")]
    SequenceTooShort { len: usize, kernel: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("non-finite value in input")]
    NumericError,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("split is empty")]
    EmptySplit,
    #[error("search space of {size} sequences exceeds the enumeration guard")]
    TooLarge { size: f64 },
    #[error("evaluation corpus is empty")]
    EmptyCorpus,
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("format error: {0}")]
    FormatError(String),
    #[error("file is truncated: {0}")]
    TruncatedFile(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("split error: {0}")]
    SplitError(String),
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, vocabulary {vocab}")]
    VocabMismatch { checkpoint: String, vocab: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeError(msg.into())
    }
}
