use std::fmt;

/// Unified error type for the whole crate.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes; the message names the operation and both shapes.
    Shape(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Token id outside the vocabulary.
    Vocab(String),
    /// Dataset generation or loading failure.
    Data(String),
    /// Checkpoint serialization/deserialization failure.
    Checkpoint(String),
    /// A loss or tensor value became NaN/Inf; carries the offending context.
    NonFinite(String),
    /// Filesystem failure with the path that caused it.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Vocab(m) => write!(f, "vocabulary error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn shape(op: &str, detail: impl fmt::Display) -> Error {
        Error::Shape(format!("{op}: {detail}"))
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Error {
        Error::Io(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Formats a shape as `[a x b x c]` for error messages.
pub fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(" x "))
}
