//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Vector or matrix dimensions inconsistent with the owning model.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A documented precondition was violated by the caller.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The integrated state left the admissible region.
    #[error("integration diverged at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    /// The filter constraint cannot be met at this state (Lgh = 0 with a
    /// negative constraint residual).
    #[error("safety filter infeasible: Lgh = 0 and constraint residual {residual}")]
    FilterInfeasible { residual: f64 },

    /// A finite buffer certifying the rollout does not exist below the cap.
    #[error("no feasible delta below the cap at the requested state")]
    DeltaInfeasible,

    /// Barrier gradient undefined (state coincides with an obstacle center).
    #[error("barrier gradient singular at the queried state")]
    Singularity,

    /// Training produced a non-finite loss.
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Malformed model or data file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
