use thiserror::Error;

/// Errors produced by the localization, detection and simulation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid timing: t_init ({t_init} s) < t_res ({t_res} s)")]
    InvalidTiming { t_init: f64, t_res: f64 },

    #[error("invalid propagation speed {0} m/s")]
    InvalidSpeed(f64),

    #[error("degenerate basis: baseline {0} m is below the minimum")]
    DegenerateBasis(f64),

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("too few nodes: {0} (need at least 3)")]
    TooFewNodes(usize),

    #[error("node index {index} out of range for {n} nodes")]
    NodeOutOfRange { index: usize, n: usize },

    #[error("invalid range between nodes {i} and {j}: {value}")]
    InvalidRange { i: usize, j: usize, value: f64 },

    #[error("degenerate reference: {0}")]
    DegenerateReference(String),

    #[error("insufficient layouts: {0} (need at least 2)")]
    InsufficientLayouts(usize),

    #[error("too few layouts: {remaining} remaining, {required} required")]
    TooFewLayouts { remaining: usize, required: usize },

    #[error("coincident points: nodes {0} and {1}")]
    CoincidentPoints(usize, usize),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("arena too small for {0} nodes at the minimum separation")]
    ArenaTooSmall(usize),

    #[error("coverage gap: no decision for node {node} at timestamp index {timestamp}")]
    CoverageGap { timestamp: usize, node: usize },

    #[error("timestamp mismatch: {0}")]
    TimestampMismatch(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("at timestamp {timestamp} s: {source}")]
    AtTimestamp {
        timestamp: f64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at(self, timestamp: f64) -> Self {
        Error::AtTimestamp {
            timestamp,
            source: Box::new(self),
        }
    }
}
