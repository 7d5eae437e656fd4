use thiserror::Error;

/// Errors produced by the EIT pipeline.
#[derive(Error, Debug)]
pub enum EitError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("linear solve did not reach tolerance (relative residual {residual:e})")]
    SolverFailure { residual: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sampler diverged at step {step}")]
    SamplerDiverged { step: usize },

    #[error("forward solve failed at iteration {iteration}: {source}")]
    ReconstructionAborted {
        iteration: usize,
        /// Misfit trace recorded before the failure.
        trace: Vec<f64>,
        #[source]
        source: Box<EitError>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<EitError>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EitError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        EitError::InvalidArgument(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        EitError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for I/O and file-format failures.
    pub fn is_io(&self) -> bool {
        match self {
            EitError::Io(_) | EitError::Format(_) => true,
            EitError::Stage { source, .. } => source.is_io(),
            _ => false,
        }
    }

    /// True when the caller passed bad arguments (as opposed to a numeric failure).
    pub fn is_usage(&self) -> bool {
        match self {
            EitError::InvalidArgument(_) | EitError::DimensionMismatch { .. } => true,
            EitError::Stage { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}

pub type Result<T, E = EitError> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(EitError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
