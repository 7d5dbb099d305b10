use std::path::PathBuf;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or lengths that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyperparameter or argument outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A physical or numerical quantity outside the domain where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// The projective denominator approached zero somewhere on the target grid.
    #[error("singular transform: {0}")]
    SingularTransform(String),

    /// A function under evaluation produced NaN or infinity.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents are malformed.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
