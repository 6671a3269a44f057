use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed pose: {0}")]
    MalformedPose(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("every depth pixel is invalid")]
    AllInvalidDepth,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("scene contains no primitives")]
    EmptyScene,

    #[error("too few points: need {needed}, have {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("normal and displacement are colinear")]
    DegenerateBasis,

    #[error("sample covariance is rank deficient (rank {rank}, need {needed})")]
    RankDeficient { rank: usize, needed: usize },
    #[error("too few samples: need {needed}, have {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("every hierarchy level is empty")]
    AllLevelsEmpty,

    #[error("model version mismatch: {expected:#x} vs {found:#x}")]
    ModelMismatch { expected: u64, found: u64 },
    #[error("duplicate frame id: {0}")]
    DuplicateFrameId(String),
    #[error("database is empty")]
    EmptyDatabase,

    #[error("signature missing for frame {0}")]
    MissingSignature(String),
    #[error("exhaustive search over {n} items exceeds the limit of {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("need at least 3 correspondences, have {found}")]
    InsufficientCorrespondences { found: usize },
    #[error("consensus failure: {inliers} inliers, need {required}")]
    ConsensusFailure { inliers: usize, required: usize },
    #[error("point configuration is degenerate (colinear or coincident)")]
    DegenerateConfiguration,
    #[error("no candidate passed validation")]
    NoValidatedCandidate,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}
