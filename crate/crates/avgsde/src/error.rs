//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A coefficient evaluation produced a non-finite value outside the
    /// simulation loop (quadrature nodes, averaging grids, ...).
    #[error("evaluation error at t = {t}: {reason}")]
    Evaluation { t: f64, reason: String },

    /// Singular kernel hit exactly during a simulation step.
    #[error("singular drift evaluation at replica {replica}, particle {particle}, step {step}")]
    Singular {
        replica: usize,
        particle: usize,
        step: usize,
    },

    /// A simulated state left the finite floats.
    #[error("state diverged to non-finite values at replica {replica}, particle {particle}, step {step}")]
    Divergence {
        replica: usize,
        particle: usize,
        step: usize,
    },

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Error raised by a drift/diffusion closure itself; the caller attaches
/// coordinates (node, replica/particle/step) when wrapping it into [`Error`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalError {
    /// Kernel evaluated exactly at a singularity.
    Singular,
    /// Output contained NaN or infinities.
    NonFinite,
    Message(String),
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalError::Singular => write!(f, "singular kernel evaluation"),
            EvalError::NonFinite => write!(f, "non-finite value"),
            EvalError::Message(m) => write!(f, "{m}"),
        }
    }
}
