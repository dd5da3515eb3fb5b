use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value {value} at index ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("invalid quantization scale {0}: must be positive and finite")]
    InvalidScale(f64),

    #[error("value {value} at flat index {index} is outside the symmetric INT8 range [-127, 127]")]
    OutOfRange { index: usize, value: i32 },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("mask row {row} has no legal position")]
    FullyMaskedRow { row: usize },

    #[error("logarithm of non-positive fixed-point value {0}")]
    NonPositiveLog(u64),

    #[error("accumulator overflow in {0}")]
    AccumulatorOverflow(&'static str),

    #[error("column {got} arrived out of order (expected column {expected})")]
    OutOfOrderColumn { expected: usize, got: usize },

    #[error("statistics finalized after {absorbed} of {expected} columns")]
    IncompleteRow { absorbed: usize, expected: usize },

    #[error("empty calibration batch")]
    EmptyCalibration,

    #[error("weight bundle: {0}")]
    Bundle(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
