use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("tau must be positive, got {0}")]
    NonPositiveTau(f64),

    #[error("non-finite gradient for anchor {anchor}, parameter {param}")]
    NonFiniteGradient { anchor: usize, param: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed header at byte {offset}: {detail}")]
    MalformedHeader {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{path}: truncated body at byte {offset}")]
    TruncatedBody { path: PathBuf, offset: u64 },

    #[error("{path}: unsupported encoding at byte {offset}: {encoding}")]
    UnsupportedEncoding {
        path: PathBuf,
        offset: u64,
        encoding: String,
    },

    #[error("{path}: unrecognized point-cloud format")]
    UnknownFormat { path: PathBuf },

    #[error("{path}: bad magic, not a MASH parameter file")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },

    #[error("{field} = {value} exceeds the storable maximum {max}")]
    CountOutOfRange {
        field: &'static str,
        value: usize,
        max: usize,
    },
}
