use alloc::string::String;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("eigensolver did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("requested {k} eigenpairs but the matrix has order {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("node {0} is isolated; diffusion is undefined for degree-0 nodes")]
    IsolatedNode(usize),
    #[error("row {row} of the diffusion operator sums to {sum}, not 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("node index {index} out of range for a graph with {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("graph has {0} node(s); positional embeddings need at least 2")]
    NodeCountTooSmall(usize),
    #[error("matrix is not orthonormal: {0}")]
    NotOrthonormal(String),
    #[error("non-finite value produced by {0}")]
    NumericalFault(&'static str),
    #[error("column {0} collapsed during orthonormalization")]
    RankDeficient(usize),
    #[error("graph has {n} nodes but the head supports at most {max}")]
    GraphTooLarge { n: usize, max: usize },
    #[error("no graphs left after filtering")]
    EmptyDatasetAfterFilter,
    #[error("graph is missing target '{0}'")]
    MissingTarget(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}
