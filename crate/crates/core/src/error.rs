use alloc::string::String;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("rank {rank} out of range 1..={max}")]
    InvalidRank { rank: usize, max: usize },
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("parameters diverged at step {step}: a mean is non-finite or a sigma left (0, inf)")]
    Diverged { step: usize },
    #[error("SNR report needs at least 2 gradient snapshots, have {have}")]
    InsufficientWindow { have: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::Error::InvalidInput(alloc::format!($($arg)*))
    };
}

pub(crate) use invalid;
pub(crate) use shape_err;
