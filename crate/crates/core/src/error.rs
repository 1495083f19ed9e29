use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Stable numeric codes, shared by the CLI exit mapping and the C ABI.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    Ok = 0,
    EmptyInput = 1,
    ShapeMismatch = 2,
    FactorShape = 3,
    NotRecovered = 4,
    UnknownTensor = 5,
    NonFinite = 6,
    InvalidThreshold = 7,
    InvalidConfig = 8,
    BadMagic = 10,
    UnsupportedVersion = 11,
    ContainerTruncated = 12,
    LengthMismatch = 13,
    MalformedHeader = 14,
    WrongContainerKind = 15,
    Io = 16,
    TaskSpec = 20,
    EmptyBatch = 21,
    TrainingDiverged = 22,
    FrameTruncated = 30,
    BadTag = 31,
    LengthOverflow = 32,
    UnexpectedMessage = 33,
    Timeout = 34,
    RoundAborted = 35,
    UnknownClient = 36,
    RemoteError = 37,
    UnknownExperiment = 40,
    Json = 41,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("LoRA factor shapes disagree for `{name}`: down {down:?}, up {up:?}, rank {rank}")]
    FactorShape {
        name: String,
        down: Vec<usize>,
        up: Vec<usize>,
        rank: usize,
    },
    #[error("tensor `{0}` is still LoRA-factored; recover it to dense first")]
    NotRecovered(String),
    #[error("tensor `{0}` is not present in the base parameters")]
    UnknownTensor(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("similarity threshold must be > 0, got {0}")]
    InvalidThreshold(f32),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic {0:?}, expected \"FULM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("container truncated: needed {needed} bytes, {available} available")]
    ContainerTruncated { needed: u64, available: u64 },
    #[error("header and payload disagree: {0}")]
    LengthMismatch(String),
    #[error("malformed container header: {0}")]
    MalformedHeader(String),
    #[error("expected a {expected} container, found a {found} container")]
    WrongContainerKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("invalid task spec: {0}")]
    TaskSpec(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch}, step {step}")]
    TrainingDiverged { epoch: usize, step: usize },

    #[error("frame truncated: needed {needed} bytes, {available} available")]
    FrameTruncated { needed: u64, available: u64 },
    #[error("unknown message tag {0}")]
    BadTag(u32),
    #[error("declared payload length {0} exceeds the frame limit")]
    LengthOverflow(u64),
    #[error("unexpected message: expected {expected}, got {got}")]
    UnexpectedMessage {
        expected: &'static str,
        got: &'static str,
    },
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("round aborted: missing uploads from {missing:?}")]
    RoundAborted { missing: Vec<String> },
    #[error("client `{client}` failed: {source}")]
    ClientFailed {
        client: String,
        #[source]
        source: Box<Error>,
    },
    #[error("upload from unexpected client `{0}`")]
    UnknownClient(String),
    #[error("peer reported error {code}: {detail}")]
    Remote { code: i32, detail: String },

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::EmptyInput => ErrorCode::EmptyInput,
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => ErrorCode::ShapeMismatch,
            Error::FactorShape { .. } => ErrorCode::FactorShape,
            Error::NotRecovered(_) => ErrorCode::NotRecovered,
            Error::UnknownTensor(_) => ErrorCode::UnknownTensor,
            Error::NonFinite(_) => ErrorCode::NonFinite,
            Error::InvalidThreshold(_) => ErrorCode::InvalidThreshold,
            Error::InvalidConfig(_) => ErrorCode::InvalidConfig,
            Error::BadMagic(_) => ErrorCode::BadMagic,
            Error::UnsupportedVersion(_) => ErrorCode::UnsupportedVersion,
            Error::ContainerTruncated { .. } => ErrorCode::ContainerTruncated,
            Error::LengthMismatch(_) => ErrorCode::LengthMismatch,
            Error::MalformedHeader(_) => ErrorCode::MalformedHeader,
            Error::WrongContainerKind { .. } => ErrorCode::WrongContainerKind,
            Error::Io(_) => ErrorCode::Io,
            Error::TaskSpec(_) => ErrorCode::TaskSpec,
            Error::EmptyBatch => ErrorCode::EmptyBatch,
            Error::TrainingDiverged { .. } => ErrorCode::TrainingDiverged,
            Error::FrameTruncated { .. } => ErrorCode::FrameTruncated,
            Error::BadTag(_) => ErrorCode::BadTag,
            Error::LengthOverflow(_) => ErrorCode::LengthOverflow,
            Error::UnexpectedMessage { .. } => ErrorCode::UnexpectedMessage,
            Error::Timeout(_) => ErrorCode::Timeout,
            Error::RoundAborted { .. } => ErrorCode::RoundAborted,
            Error::ClientFailed { .. } => ErrorCode::RoundAborted,
            Error::UnknownClient(_) => ErrorCode::UnknownClient,
            Error::Remote { .. } => ErrorCode::RemoteError,
            Error::UnknownExperiment(_) => ErrorCode::UnknownExperiment,
            Error::Json(_) => ErrorCode::Json,
        }
    }

    /// The innermost error, looking through `ClientFailed` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::ClientFailed { source, .. } => source.root(),
            other => other,
        }
    }
}
