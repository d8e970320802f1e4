use thiserror::Error;

/// Errors surfaced by the toolkit.
///
/// Monte Carlo reports classify replicate errors with
/// [`crate::harness::FailureKind::classify`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("state magnitude exceeded 1e{cap_log10} at step {step}")]
    Overflow { step: usize, cap_log10: f64 },

    #[error("Riccati iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular Gram matrix{}: lambda_min = {eigenvalue:e}", episode.map(|e| format!(" in episode {e}")).unwrap_or_default())]
    SingularGram { eigenvalue: f64, episode: Option<usize> },

    #[error("random feedback bundle stayed degenerate after {redraws} redraws (epsilon_tilde = {epsilon_tilde:e})")]
    DegenerateDraw { redraws: usize, epsilon_tilde: f64 },

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl Error {
    /// Errors caused by the inputs rather than by a computation.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Dimension { .. } | Error::Parse(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(context: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::Dimension {
        context,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
