use thiserror::Error;

/// Errors raised by the lab's models, solvers and trainers.
#[derive(Debug, Error)]
pub enum CarError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("class index {class} out of range for {class_count} classes")]
    ClassOutOfRange { class: usize, class_count: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("enumeration over {size} variables exceeds the limit of {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("no words of class {0} exist in the model")]
    NoClassWords(usize),

    #[error("class {0} has no documents")]
    MissingClass(usize),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CarError>;

pub(crate) fn check_class(class: usize, class_count: usize) -> Result<()> {
    if class < class_count {
        Ok(())
    } else {
        Err(CarError::ClassOutOfRange { class, class_count })
    }
}
