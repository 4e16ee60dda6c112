use thiserror::Error;

use crate::mode::BitMode;
use crate::quantize::Family;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value {0} is outside the legacy quantizer domain [0, 1]")]
    Domain(f64),

    #[error("unsupported bit-width {0} (expected 1..=8 or 32)")]
    BitWidth(u32),

    #[error("{0:?} quantizers have no switch function (thresholds are not aligned)")]
    UnsupportedFamily(Family),

    #[error("bit mode {0} is not declared for this model")]
    UnknownMode(BitMode),

    #[error("running statistics for bit mode {0} are not populated (train or recalibrate first)")]
    MissingStats(BitMode),

    #[error("non-finite loss {value} in bit mode {mode}")]
    NonFinite { mode: BitMode, value: f64 },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("model format: {0}")]
    Format(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
