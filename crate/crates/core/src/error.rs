use std::io;
use std::path::PathBuf;

/// Every failure the toolkit can report.
///
/// Variant names are part of the CLI contract: the binary prints them
/// verbatim so scripts can match on the error kind.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input is empty")]
    EmptyInput,

    #[error("malformed digest: {0}")]
    MalformedDigest(String),

    #[error("input of {len} bytes is shorter than the {min}-byte minimum")]
    InputTooShort { len: usize, min: usize },

    #[error("input of {0} bytes exceeds the supported maximum")]
    InputTooLong(u64),

    #[error("bucket population too degenerate to form quartiles")]
    InsufficientVariation,

    #[error("anomaly fraction {0} outside [0.01, 0.99]")]
    FractionOutOfRange(f64),

    #[error("anomaly of {needed} bytes does not fit a pool of {available} bytes")]
    PoolTooSmall { needed: usize, available: usize },

    #[error("payload of {len} bytes is too short for TLSH")]
    HostTooShortForTlsh { len: usize },

    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("sequences from different digest algorithms in one batch")]
    MixedAlgorithms,

    #[error("training labels requested but sequence {0} has none")]
    MissingLabels(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training data contains a single class")]
    SingleClassData,

    #[error("training data is empty")]
    EmptyData,

    #[error("payload {id} cannot be hashed: {reason}")]
    UnhashablePayload { id: String, reason: String },

    #[error("no prediction for entry {0}")]
    MissingPrediction(String),

    #[error("prediction for unknown entry {0}")]
    UnknownId(String),

    #[error("no checkpoint supplied for method {0}")]
    MissingCheckpoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// The variant name, as printed by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            Error::EmptyInput => "EmptyInput",
            Error::MalformedDigest(_) => "MalformedDigest",
            Error::InputTooShort { .. } => "InputTooShort",
            Error::InputTooLong(_) => "InputTooLong",
            Error::InsufficientVariation => "InsufficientVariation",
            Error::FractionOutOfRange(_) => "FractionOutOfRange",
            Error::PoolTooSmall { .. } => "PoolTooSmall",
            Error::HostTooShortForTlsh { .. } => "HostTooShortForTlsh",
            Error::IoFailure { .. } => "IoFailure",
            Error::SchemaMismatch(_) => "SchemaMismatch",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::MixedAlgorithms => "MixedAlgorithms",
            Error::MissingLabels(_) => "MissingLabels",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::SingleClassData => "SingleClassData",
            Error::EmptyData => "EmptyData",
            Error::UnhashablePayload { .. } => "UnhashablePayload",
            Error::MissingPrediction(_) => "MissingPrediction",
            Error::UnknownId(_) => "UnknownId",
            Error::MissingCheckpoint(_) => "MissingCheckpoint",
            Error::InvalidConfig(_) => "InvalidConfig",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
