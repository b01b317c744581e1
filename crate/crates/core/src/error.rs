use alloc::string::String;

/// Errors produced by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid behavior schema: {0}")]
    InvalidSchema(String),
    #[error("source {source_index}, line {line}: expected 2 tab-separated fields, found {fields}")]
    MalformedLine {
        source_index: usize,
        line: usize,
        fields: usize,
    },
    #[error("no interactions in any behavior")]
    EmptyDataset,
    #[error("user {user} has interacted with every item under behavior {behavior}")]
    NoNegativeCandidates { user: u32, behavior: usize },
    #[error("{what} = {value} is out of range (must be < {bound})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        bound: usize,
    },
    #[error("cardinality {0} is below 2")]
    InvalidCardinality(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("no test positives to evaluate")]
    NoTestPositives,
    #[error("differences have zero variance")]
    ZeroVariance,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
