//! Error types shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry conflict: {0}")]
    GeometryConflict(String),

    #[error("unknown fiber label {0}")]
    UnknownLabel(String),

    #[error("solver failed to converge: relative residual {residual:.3e} after {iterations} iterations")]
    SolverFailure {
        iterations: usize,
        residual: f64,
        /// Relative residual sampled over the iteration history.
        history: Vec<f64>,
    },

    #[error("point {0:?} is outside the map interior")]
    OutOfBounds([f64; 2]),

    #[error("near-singular evaluation: point within one quadrature cell of the surface")]
    NearSingularity,

    #[error("basis map mismatch: {0}")]
    StaleBasis(String),

    #[error("not a well: {0}")]
    NotAWell(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("change of variables requires strictly monotonic measured positions: {0}")]
    NonMonotonicScan(String),

    #[error("patch potentials have disjoint abscissa ranges")]
    DisjointRanges,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("optimization did not converge within {0} iterations")]
    NonConvergence(usize),

    #[error("schema error in {path} line {line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Other(String),
}
