use thiserror::Error;

/// Coarse error classes, used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported isotope `{0}`")]
    UnsupportedIsotope(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("evaluation point below the surface (z = {z:e} m)")]
    BelowSurface { z: f64 },
    #[error("zero-length separation vector")]
    ZeroLength,
    #[error("zero coupling gradient at slice r = {r:e} m")]
    ZeroGradient { r: f64 },
    #[error("slice {index}: signal saturated (s_net underflow); reduce rho_ctrl or rho_det")]
    SaturatedSlice { index: usize },
    #[error("solver did not converge: relative residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("propagator unitarity deficit {deficit:e} exceeds tolerance")]
    Unitarity { deficit: f64 },
    #[error("spin system has {0} spins; at most {1} supported")]
    OversizeSystem(usize, usize),
    #[error("non-decaying density column (fitted slope {slope:e} >= 0)")]
    NonDecaying { slope: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) => ErrorKind::Io,
            Error::SaturatedSlice { .. }
            | Error::NonConvergence { .. }
            | Error::Unitarity { .. }
            | Error::NonDecaying { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
