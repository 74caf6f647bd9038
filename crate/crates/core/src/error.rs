use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error: {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("{what} {value} out of range [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: i64,
        lo: i64,
        hi: i64,
    },

    #[error("degenerate attention mask: query row {row} has no unmasked key")]
    DegenerateMask { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("degenerate normalization: percentile spread is zero")]
    DegenerateNormalization,

    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("incompatible checkpoints: mismatched {}", .fields.join(", "))]
    Compatibility { fields: Vec<String> },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    ///
    /// | code | meaning |
    /// |------|---------|
    /// | 2 | configuration |
    /// | 3 | missing dependency / incompatible checkpoints |
    /// | 4 | I/O |
    /// | 5 | data |
    /// | 1 | anything else |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Dependency(_) | Error::Compatibility { .. } => 3,
            Error::Io { .. } | Error::Checkpoint(_) => 4,
            Error::Data(_) | Error::DegenerateFit(_) | Error::DegenerateNormalization => 5,
            _ => 1,
        }
    }
}
