use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row counts disagree: {what}")]
    MismatchedRows { what: String },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("degenerate probability row {row}: {reason}")]
    DegenerateRow { row: usize, reason: String },

    #[error("inconsistent block dimensions: {0}")]
    InconsistentDim(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("bad magic bytes {found:?} in {path}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file {path}: expected {expected} bytes, found {actual}")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("patch scale {scale} exceeds image side {image_side}")]
    ScaleTooLarge { scale: u32, image_side: u32 },

    #[error("no sampling scales given")]
    EmptyScales,

    #[error("grid must be at least 1")]
    InvalidGrid,

    #[error("invalid planted model: {0}")]
    InvalidModel(String),

    #[error("empty patch population")]
    EmptyPopulation,

    #[error("selected codeword {0} is inactive")]
    InactiveSelected(usize),

    #[error("codeword index {index} out of range for {k} codewords")]
    BadCodeword { index: usize, k: usize },

    #[error("image {0} has no patches")]
    EmptyImage(String),

    #[error("need at least {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },

    #[error("requested {requested} components but data has numerical rank {rank}")]
    RankDeficient { rank: usize, requested: usize },

    #[error("every image needs a label")]
    MissingLabels,

    #[error("cannot select {k} codewords: need 2K <= {classes} classes and K >= 1")]
    KTooLarge { k: usize, classes: usize },

    #[error("training set contains a single class")]
    SingleClass,

    #[error("no training features")]
    EmptyFeatures,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite { what: what.into() }
    }
}

/// Attaches a pipeline stage name to an error.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        })
    }
}
