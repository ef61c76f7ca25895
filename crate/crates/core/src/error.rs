use std::fmt;

use thiserror::Error;

/// Which invariant of a token distribution was broken.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionViolation {
    Empty,
    NonFinite { index: usize },
    Negative { index: usize, value: f64 },
    Sum { sum: f64 },
    WrongLength { expected: usize, actual: usize },
}

impl fmt::Display for DistributionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Empty => write!(f, "empty distribution"),
            Self::NonFinite { index } => write!(f, "entry {index} is not finite"),
            Self::Negative { index, value } => write!(f, "entry {index} is negative ({value})"),
            Self::Sum { sum } => write!(f, "probabilities sum to {sum}, expected 1"),
            Self::WrongLength { expected, actual } => {
                write!(f, "distribution has {actual} entries, vocabulary has {expected}")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has no nonzero entry")]
    ZeroVector,
    #[error("embedding contains a non-finite value")]
    NonFiniteEmbedding,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unrecognized index format: {0}")]
    FormatVersionMismatch(String),
    #[error("answer trace is empty")]
    EmptyTrace,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("probability of exactly zero at token {index}")]
    ZeroProbability { index: usize },
    #[error("probability {value} outside (0, 1] at token {index}")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("modality needs a query text embedding")]
    MissingQueryEmbedding,
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("unknown image: {0}")]
    UnknownImage(String),
    #[error("k-reciprocal rerank needs at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("no retrieved hits to build a prompt from")]
    EmptyHits,
    #[error("instance-level prompt needs a non-empty entity")]
    MissingEntity,
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("invalid token distribution: {0}")]
    InvalidDistribution(DistributionViolation),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("unsupported context: {0}")]
    UnsupportedContext(String),
    #[error("{0} record(s) have no prediction")]
    MissingPredictions(usize),
    #[error("malformed grouping: {0}")]
    MalformedGrouping(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable machine-readable name, used on the CLI's stderr and in wire error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Self::ZeroVector => "ZeroVector",
            Self::NonFiniteEmbedding => "NonFiniteEmbedding",
            Self::DimensionMismatch { .. } => "DimensionMismatch",
            Self::EmptyKnowledgeBase => "EmptyKnowledgeBase",
            Self::Io(_) => "IoError",
            Self::FormatVersionMismatch(_) => "FormatVersionMismatch",
            Self::EmptyTrace => "EmptyTrace",
            Self::LengthMismatch { .. } => "LengthMismatch",
            Self::ZeroProbability { .. } => "ZeroProbability",
            Self::ProbabilityOutOfRange { .. } => "ProbabilityOutOfRange",
            Self::MissingQueryEmbedding => "MissingQueryEmbedding",
            Self::ProviderUnavailable(_) => "ProviderUnavailable",
            Self::UnknownImage(_) => "UnknownImage",
            Self::TooFewCandidates(_) => "TooFewCandidates",
            Self::EmptyHits => "EmptyHits",
            Self::MissingEntity => "MissingEntity",
            Self::AlphaOutOfRange(_) => "AlphaOutOfRange",
            Self::InvalidDistribution(_) => "InvalidDistribution",
            Self::Backend(_) => "BackendError",
            Self::UnsupportedContext(_) => "UnsupportedContext",
            Self::MissingPredictions(_) => "MissingPredictions",
            Self::MalformedGrouping(_) => "MalformedGrouping",
            Self::Config(_) => "ConfigError",
            Self::Parse(_) => "ParseError",
        }
    }

    /// Rebuilds an error from a wire `(code, message)` pair.
    pub fn from_code(code: &str, message: String) -> Self {
        match code {
            "ProviderUnavailable" => Self::ProviderUnavailable(message),
            "UnknownImage" => Self::UnknownImage(message),
            "UnsupportedContext" => Self::UnsupportedContext(message),
            "EmptyTrace" => Self::EmptyTrace,
            _ => Self::Backend(format!("{code}: {message}")),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
