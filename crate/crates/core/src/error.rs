use thiserror::Error;

/// Unified error type for the library.
///
/// Contract violations that can only arise from caller bugs (index out of
/// range, mismatched dimensions passed to low-level kernels) panic instead;
/// everything reachable from user input or I/O comes through here.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape or dimension constraint was violated (zero-sized axis,
    /// mismatched buffer length, incompatible operand shapes).
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is outside its documented domain.
    #[error("config error: {0}")]
    Config(String),

    /// An input that must be finite contained NaN or infinity.
    #[error("non-finite values in {0}")]
    NonFinite(String),

    /// Training loss exceeded the divergence threshold.
    #[error("training diverged: loss {loss:.3e} exceeded {limit:.1e} at step {step}")]
    Diverged { loss: f64, limit: f64, step: usize },

    /// Malformed file contents (image codec, checkpoint container, config).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
