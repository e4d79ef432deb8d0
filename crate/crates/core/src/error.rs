use std::path::PathBuf;

/// Errors surfaced by the model, the data pipeline and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data outside its documented domain.
    #[error("validation error: {0}")]
    Validation(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("numeric error in {location}: {detail}")]
    Numeric { location: String, detail: String },

    /// The procedural generator placed a component outside the canvas.
    #[error("generation error: component `{component}` leaves the canvas")]
    Generation { component: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// Malformed checkpoint, manifest or config file.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    /// Short machine-readable tag used by the CLI failure line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Numeric { .. } => "numeric",
            Error::Generation { .. } => "generation",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Format { .. } => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for returning a configuration error with a formatted message.
macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}
pub(crate) use config_err;
