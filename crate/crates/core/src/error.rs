use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("correlation must lie strictly inside (-1, 1), got {0}")]
    InvalidCorrelation(f64),

    #[error("probability must lie strictly inside (0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("NaN passed to {0}")]
    NotANumber(&'static str),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid index model: {0}")]
    InvalidModel(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid distribution law: {0}")]
    InvalidLaw(String),

    #[error("unknown distribution law `{0}`")]
    UnknownLaw(String),

    #[error("invalid DGP specification: {0}")]
    InvalidSpec(String),

    #[error("unknown builtin DGP `{0}` (expected one of semiparam-1..4, twostep-5.1, param-design-1..3)")]
    UnknownDgp(String),

    #[error("joint CDF returned {value} at {point:?}, outside [0, 1]")]
    CdfOutOfRange { point: Vec<f64>, value: f64 },

    #[error("negative cell mass {mass:e} for cell {cell:?}")]
    NegativeMass { cell: Vec<usize>, mass: f64 },

    #[error("observation {obs} has non-positive predicted mass {mass:e} in its observed cell {cell:?}")]
    ZeroCellMass {
        obs: usize,
        cell: Vec<usize>,
        mass: f64,
    },

    #[error("degenerate data: unobserved categories (dimension, category): {empty:?}")]
    DegenerateData { empty: Vec<(usize, usize)> },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("information matrix is singular ({0}); run the identification diagnostics on this design")]
    SingularInformation(String),

    #[error("estimate is on the boundary of the parameter space: {0}")]
    BoundaryEstimate(String),

    #[error("implied bound {value} in dimension {dim} lies outside the grid hull [{lo}, {hi}]")]
    BoundOutsideGrid {
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible normalization: {0}")]
    InfeasibleNormalization(String),

    #[error("exclusivity of covariates is not declared: {0}")]
    MissingExclusivity(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("worker pool: {0}")]
    Pool(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
