use thiserror::Error;

pub type Result<T> = std::result::Result<T, KlError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KlError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// The stacked coupled-Riccati system could not be solved reliably.
    #[error("coupled Riccati system singular at t={t} (condition estimate {condition:.3e})")]
    SingularRiccati { t: usize, condition: f64 },

    /// The reference log-density has no negative-definite curvature at the located mode.
    #[error("Laplace approximation failed at t={t}: log-density Hessian is not negative definite")]
    SingularLaplace { t: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("line search failed at iteration {iteration}: {reason}")]
    LineSearchFailure { iteration: usize, reason: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<KlError>,
    },
}

impl KlError {
    pub fn with_context(self, context: impl Into<String>) -> Self {
        KlError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any [`KlError::Context`] wrappers.
    pub fn root_cause(&self) -> &KlError {
        match self {
            KlError::Context { source, .. } => source.root_cause(),
            other => other,
        }
    }

    pub(crate) fn is_numerical(&self) -> bool {
        matches!(self.root_cause(), KlError::Numerical(_))
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(KlError::Dimension(msg.into()))
}
