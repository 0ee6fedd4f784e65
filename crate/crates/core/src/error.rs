use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("row {row} of {context} has zero norm; cosine similarity is undefined")]
    ZeroNorm { context: &'static str, row: usize },
    #[error("match-label row {row} has no positive entry")]
    DegenerateLabelRow { row: usize },
    #[error("required input `{0}` is missing")]
    MissingInput(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("{kind} `{id}` references unknown image `{missing}`")]
    DanglingReference {
        kind: &'static str,
        id: String,
        missing: String,
    },
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("encoder fingerprint mismatch")]
    FingerprintMismatch,
    #[error("encoder is frozen; stage-1 fine-tuning needs trainable encoders")]
    EncoderFrozen,
    #[error("encoder must be frozen for this operation")]
    EncoderNotFrozen,
    #[error("batch of {requested} exceeds sampler capacity {capacity}")]
    BatchTooLarge { requested: usize, capacity: usize },
    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },
    #[error("conflicting verdicts for pair ids {0:?}")]
    VerdictConflict(Vec<String>),
    #[error("image source failed: {0}")]
    ImageSource(String),
    #[error("aborted: {0}")]
    Aborted(String),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl core::fmt::Display,
        found: impl core::fmt::Display,
    ) -> Self {
        use alloc::string::ToString;
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
