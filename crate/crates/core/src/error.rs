use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("unsupported schema_version {found} (expected {expected})")]
    Version { found: i64, expected: i64 },

    #[error("{what} out of range: {value} not in [{lo}, {hi}]")]
    Range {
        what: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("scene/submission pairing: {0}")]
    Pairing(String),

    #[error("training halted at step {step} (sample {sample}): {message}")]
    NonFinite {
        step: usize,
        sample: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dimension(
        what: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
