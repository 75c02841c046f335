//! Error types shared by the pipeline stages.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CtpError {
    /// Mis-configured shapes, dimensions, or parameter blocks.
    Config(String),
    /// Invalid caller input (empty sequence, insufficient samples, misaligned series).
    Input(String),
    /// A non-finite value or overflow in a numeric routine; names the site.
    NumericFailure(String),
    /// ODE state blew up; carries the time of the first non-finite state.
    Divergence { time: f64 },
    /// A feature with zero variance cannot be standardized.
    DegenerateFeature(String),
    /// Causal identification could not collect enough converged models.
    IdentificationFailure(String),
}

impl fmt::Display for CtpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CtpError::Config(msg) => write!(f, "configuration error: {msg}"),
            CtpError::Input(msg) => write!(f, "input error: {msg}"),
            CtpError::NumericFailure(msg) => write!(f, "numeric failure: {msg}"),
            CtpError::Divergence { time } => {
                write!(f, "trajectory diverged (non-finite state) at t={time}")
            }
            CtpError::DegenerateFeature(name) => {
                write!(f, "degenerate feature (zero variance): {name}")
            }
            CtpError::IdentificationFailure(msg) => {
                write!(f, "causal identification failed: {msg}")
            }
        }
    }
}

impl core::error::Error for CtpError {}
