use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structural mismatch at tensor `{name}`: {detail}")]
    StructuralMismatch { name: String, detail: String },

    #[error("base model mismatch: expected fingerprint {expected:016x}, found {found:016x}")]
    BaseMismatch { expected: u64, found: u64 },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("corrupt sparse data in `{name}`: {detail}")]
    Corruption { name: String, detail: String },

    #[error("training diverged at epoch {epoch}: loss or parameters left the finite range")]
    Divergence { epoch: usize },

    #[error("singular system while solving layer `{layer}`")]
    Singular { layer: String },

    #[error(
        "no lambda bracket: sparsity {low_lambda_sparsity:.4} at lambda=1e-9, \
         {high_lambda_sparsity:.4} at lambda=1e-1, target {target:.4}"
    )]
    NoLambdaBracket {
        low_lambda_sparsity: f64,
        high_lambda_sparsity: f64,
        target: f64,
    },

    #[error("unknown task id `{0}`")]
    UnknownTask(String),

    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn mismatch(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::StructuralMismatch {
            name: name.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }
}
