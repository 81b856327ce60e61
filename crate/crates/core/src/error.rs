use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("could not place {placed} of {requested} boxes after {attempts} attempts")]
    Placement {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("{module}: {source}")]
    Module {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("training aborted at step {step}: {message}")]
    Diverged { step: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Tags an error with the pipeline stage that produced it.
    pub fn in_module(self, module: &'static str) -> Self {
        match self {
            e @ Error::Module { .. } => e,
            e => Error::Module {
                module,
                source: Box::new(e),
            },
        }
    }

    /// True when the root cause is a shape/dimension mismatch.
    pub fn is_shape_error(&self) -> bool {
        match self {
            Error::Dimension(_) => true,
            Error::Module { source, .. } => source.is_shape_error(),
            _ => false,
        }
    }

    /// Name of the stage that produced the error, if tagged.
    pub fn module(&self) -> Option<&'static str> {
        match self {
            Error::Module { module, .. } => Some(module),
            _ => None,
        }
    }
}

/// Attach a module name to the error of a fallible expression.
pub(crate) trait ResultExt<T> {
    fn in_module(self, module: &'static str) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn in_module(self, module: &'static str) -> Result<T> {
        self.map_err(|e| e.in_module(module))
    }
}
