use thiserror::Error;

/// Errors raised by problem validation, the solvers and the data loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("{what} entry {index} is not strictly positive ({value})")]
    NonPositiveWeight {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("cost entry ({row}, {col}) is negative ({value})")]
    NegativeCost { row: usize, col: usize, value: f64 },

    #[error("{what} entry ({row}, {col}) is not finite")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },

    #[error("mass imbalance: source mass {source_mass} vs target mass {target_mass}")]
    MassImbalance { source_mass: f64, target_mass: f64 },

    #[error("parameter {name} = {value} outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("index ({row}, {col}) out of range for {n}x{m}")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        n: usize,
        m: usize,
    },

    #[error("source {source_index} is supervised more than once")]
    DuplicateSource { source_index: usize },

    #[error("adjacency matrix is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },

    #[error("adjacency matrix has a nonzero diagonal at {0}")]
    SelfLoop(usize),

    #[error("negative edge weight at ({row}, {col})")]
    NegativeWeight { row: usize, col: usize },

    #[error("consistency utility requires Laplacians of the two graphs")]
    MissingLaplacians,

    #[error("{0} utility does not take Laplacians")]
    UnexpectedLaplacians(&'static str),

    #[error("numerical failure in {0}")]
    Numerical(String),

    #[error("strategy {0} requires a source graph")]
    MissingGraph(&'static str),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("oracle failed on source {source_index}: {reason}")]
    Oracle { source_index: usize, reason: String },

    #[error("zero-norm feature vector in {set} row {row}")]
    ZeroNorm { set: &'static str, row: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid parameter: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
