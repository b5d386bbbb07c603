use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported net base {0}: only base 2 is implemented")]
    UnsupportedBase(u32),

    #[error("dimension {requested} exceeds the direction-number table (max {max})")]
    DimensionTooLarge { requested: usize, max: usize },

    #[error("2^{m} points is too many to enumerate (limit 2^{max})")]
    TooManyPoints { m: u32, max: u32 },

    #[error("quality parameter t={requested} not attained, construction has t={actual}")]
    QualityNotAttained { requested: u32, actual: u32 },

    #[error("instance too large for exhaustive check: {0}")]
    InstanceTooLarge(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("points {i} and {j} coincide: Riesz energy is infinite")]
    InfiniteEnergy { i: usize, j: usize },

    #[error("tangent polygon is unbounded: angular gap {gap} >= pi")]
    UnboundedCover { gap: f64 },

    #[error("empty point set for ellipsoid {0}")]
    EmptyPointSet(usize),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("inconsistent equality constraints")]
    InconsistentEqualities,

    #[error("reference solution has zero norm")]
    ZeroReference,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("sweep cell {cell}: {source}")]
    Cell { cell: String, source: Box<Error> },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
