use thiserror::Error;

/// Errors raised by the detection engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty box list")]
    EmptyBoxList,

    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid detectability pattern {mask:#b} for {nodes} nodes")]
    InvalidPattern { mask: u32, nodes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("hypothesis {id} not found for node {node}")]
    DanglingHypothesis { node: usize, id: u64 },

    #[error("parameter dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed annotation: {0}")]
    MalformedAnnotation(String),

    #[error("training set has no {0} examples")]
    EmptyClass(&'static str),

    #[error("non-finite feature value in example {0}")]
    NonFiniteFeature(usize),

    #[error("all {total} positive objects were rejected during switch labelling")]
    NoPositives { total: usize },

    #[error("search space of {count} configurations exceeds the brute-force guard of {limit}")]
    SearchSpaceTooLarge { count: f64, limit: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
