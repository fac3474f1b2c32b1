use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid block layout: {0}")]
    InvalidLayout(&'static str),
    #[error("block ({row}, {col}) is out of range for {blocks} block rows")]
    BlockOutOfRange { row: usize, col: usize, blocks: usize },
    #[error("block ({row}, {col}) is already occupied")]
    BlockOccupied { row: usize, col: usize },
    #[error("block ({row}, {col}) is not occupied")]
    BlockVacant { row: usize, col: usize },
    #[error("block row {row} already holds the maximum of {max} blocks")]
    RowFull { row: usize, max: usize },
    #[error("dense allocation of {neurons} neurons exceeds the limit of {limit}")]
    TooLarge { neurons: usize, limit: usize },
    #[error("non-finite pre-activation at neuron {neuron}")]
    NonFinite { neuron: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("malformed snapshot: {0}")]
    Snapshot(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
