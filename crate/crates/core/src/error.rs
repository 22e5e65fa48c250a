use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficientDesign { rank: usize, cols: usize },

    #[error("invalid sketch dimension r = {r} for n = {n} rows (need 1 <= r <= n)")]
    InvalidSketchDim { r: usize, n: usize },

    #[error("not enough sketch draws: got {0}, need at least 2")]
    InsufficientDraws(usize),

    #[error("all {0} sketch draws were rank deficient; nothing left to condition on")]
    AllDrawsRankDeficient(usize),

    #[error("bound undefined: {0}")]
    BoundUndefined(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {source_name} at row {row}, column {col}: {message}")]
    Parse {
        source_name: String,
        row: usize,
        col: usize,
        message: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sweep cell scheme={scheme} r={r} replicate={replicate}: {source}")]
    Cell {
        scheme: String,
        r: usize,
        replicate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
