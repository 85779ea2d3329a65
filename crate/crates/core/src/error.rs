use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: operands live on different grids")]
    GridMismatch,

    #[error("empty family of measures")]
    EmptyFamily,

    #[error("cell set has {size} cells; brute-force partition enumeration is limited to {limit}")]
    TooManyCells { size: usize, limit: usize },

    #[error(
        "sequence is not monotone: element {index} is smaller than its predecessor at cell {cell}"
    )]
    NotMonotone { index: usize, cell: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),

    #[error("no closed-form intensity for {0}; use empirical_intensity")]
    NoClosedForm(String),

    #[error("atom sets are not disjoint (shared atom {0})")]
    NotDisjoint(usize),

    #[error("adaptedness violation: value at cut-off {cutoff} read cell {cell}")]
    Adaptedness { cutoff: usize, cell: usize },

    #[error("time {0} is not a grid point")]
    OffGrid(f64),

    #[error("quadratic variation vanishes on cell {cell} but the bilinear measure is {alpha:e}")]
    Inconsistent { cell: usize, alpha: f64 },

    #[error("non-finite state at path {path}, time index {time}")]
    NonFinite { path: usize, time: usize },

    #[error("picard iteration did not converge after {iterations} iterations (last ratio {last_ratio:.4}, residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        last_ratio: f64,
        residual: f64,
    },

    #[error("refused: {0}")]
    Refused(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
