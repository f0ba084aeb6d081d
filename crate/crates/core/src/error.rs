//! Crate-wide error type.
//!
//! Variants map onto the CLI exit codes: configuration problems exit 2, data
//! problems exit 3 and training divergence exits 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad schedule range, indivisible resolution, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid runtime input (degenerate depth, out-of-range timestep, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A caller broke an internal contract (shape mismatch between stages).
    #[error("contract error: {0}")]
    Contract(String),

    /// Dataset / filesystem problems.
    #[error("data error: {0}")]
    Data(String),

    /// Evaluation cannot proceed (no valid pixels, zero median, ...).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Training produced a non-finite loss.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: 2 config, 3 data, 4 divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Divergence(_) => 4,
            _ => 1,
        }
    }
}
