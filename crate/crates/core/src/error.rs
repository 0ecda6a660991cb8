use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("duplicate song_id `{0}`")]
    DuplicateSong(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("empty file: {0}")]
    EmptyFile(PathBuf),

    #[error("sampling removed every country")]
    EmptySample,

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),

    #[error("silent input")]
    SilentInput,

    #[error("zero-length audio")]
    EmptyAudio,

    #[error("signal of {len} samples is shorter than one window of {window}")]
    TooShort { len: usize, window: usize },

    #[error("kernel of {kernel} exceeds spectrogram extent {extent}")]
    KernelTooLarge { kernel: usize, extent: usize },

    #[error("missing stem file {0}")]
    MissingStem(PathBuf),

    #[error("stem duration mismatch: vocals {vocals:.3} s, drums {drums:.3} s")]
    StemDurationMismatch { vocals: f64, drums: f64 },

    #[error("non-positive frequency {0}")]
    NonPositiveFrequency(f64),

    #[error("insufficient voiced material: {got} interval samples, need {need}")]
    InsufficientVoiced { got: usize, need: usize },

    #[error("insufficient onsets: {got}, need {need}")]
    InsufficientOnsets { got: usize, need: usize },

    #[error("insufficient ratio samples: {got}, need {need}")]
    InsufficientRatios { got: usize, need: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed density file: {0}")]
    BadDensityFile(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
