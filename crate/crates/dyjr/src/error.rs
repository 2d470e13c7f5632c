use thiserror::Error;

/// Error taxonomy shared across the crate. Each variant maps to a process
/// exit code at the CLI boundary (config 2, numeric 3, I/O 4).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid experiment configuration (bad bounds, unknown keys, digest mismatch).
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an operation precondition (bad token, out-of-range index).
    #[error("input error: {0}")]
    Input(String),

    /// An instance is too large to handle exactly.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Non-finite value where a finite one is required; aborts the training step.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Capacity(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
