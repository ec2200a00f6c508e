use thiserror::Error;

pub type Result<T, E = MtpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MtpError {
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("input of length {len} exceeds max_seq {max}")]
    Overlong { len: usize, max: usize },

    #[error("adapters already attached")]
    AdaptersAttached,

    #[error("vocabulary of size {0} too large for exact marginalization")]
    VocabTooLarge(usize),

    #[error("exact marginalization budget exceeded: {0} intermediate sequences")]
    BudgetExceeded(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("no qualifying evaluation positions: {0}")]
    EmptyEval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MtpError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MtpError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, MtpError::NonFinite(_))
    }
}
