use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {message}")]
    Config { message: String, keys: Vec<String> },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("vocab digest mismatch: checkpoint has {checkpoint}, corpus has {corpus}")]
    VocabDigest { checkpoint: String, corpus: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config {
            message: message.into(),
            keys: Vec::new(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Parse { .. } | Error::Data(_) | Error::VocabDigest { .. } | Error::Io { .. } => 3,
            Error::Json(_) => 3,
            Error::Shape { .. } | Error::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Parse { .. } => "parse",
            Error::Data(_) => "data",
            Error::VocabDigest { .. } => "vocab_digest",
            Error::Shape { .. } => "shape",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Machine-readable form printed by the CLI on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        match self {
            Error::Config { keys, .. } if !keys.is_empty() => {
                v["keys"] = serde_json::json!(keys);
            }
            Error::VocabDigest { checkpoint, corpus } => {
                v["checkpoint_digest"] = serde_json::json!(checkpoint);
                v["corpus_digest"] = serde_json::json!(corpus);
            }
            Error::Parse { line, .. } => {
                v["line"] = serde_json::json!(line);
            }
            _ => {}
        }
        v
    }
}
