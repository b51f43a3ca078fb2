use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite state at t={time}{}", context_suffix(.context))]
    NumericalBlowup { time: f64, context: String },

    #[error("step size underflow at t={time} (h={step:e})")]
    StiffnessFailure { time: f64, step: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dense system with {rows} rows exceeds guard of {limit}")]
    SizeGuard { rows: usize, limit: usize },

    #[error("stale solution: residual {residual:e} exceeds tolerance {tolerance:e}")]
    StaleSolution { residual: f64, tolerance: f64 },

    #[error("batch element {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn in_batch(self, index: usize) -> Self {
        Error::Batch {
            index,
            source: Box::new(self),
        }
    }

    /// Attach a note to a blowup raised by an inner integration.
    pub(crate) fn with_context(self, note: &str) -> Self {
        match self {
            Error::NumericalBlowup { time, context } if context.is_empty() => {
                Error::NumericalBlowup {
                    time,
                    context: note.to_string(),
                }
            }
            Error::Batch { index, source } => Error::Batch {
                index,
                source: Box::new(source.with_context(note)),
            },
            other => other,
        }
    }

    /// The innermost error, looking through batch wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Batch { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::NumericalBlowup { .. } => "numerical_blowup",
            Error::StiffnessFailure { .. } => "stiffness_failure",
            Error::Config(_) => "config",
            Error::SizeGuard { .. } => "size_guard",
            Error::StaleSolution { .. } => "stale_solution",
            Error::Io(_) => "io",
            Error::Batch { .. } => unreachable!(),
        }
    }
}
