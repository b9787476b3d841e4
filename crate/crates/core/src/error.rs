use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("probability vector for class {class} sums to {sum}, expected 1")]
    NotNormalized { class: usize, sum: f64 },

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("calibration transform of kind {found} cannot be used for {wanted}")]
    KindMismatch { wanted: &'static str, found: String },

    #[error("every class is suppressed by the mean-score threshold")]
    AllSuppressed,

    #[error("row {row}: {reason}")]
    Parse { row: usize, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {reason}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        arg,
        reason: reason.into(),
    }
}
