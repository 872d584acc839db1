use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON; `offset` is the byte offset of the failure.
    #[error("{path}: JSON parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    /// One or more semantic problems, all reported together.
    #[error("validation failed ({} problem{}):\n  {}", .0.len(), if .0.len() == 1 { "" } else { "s" }, .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(vec![msg.into()])
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Maps a serde_json error on `text` into a [`Error::Parse`] carrying the byte offset.
    pub(crate) fn json(path: impl Into<PathBuf>, text: &str, err: serde_json::Error) -> Self {
        let (line, column) = (err.line(), err.column());
        Error::Parse {
            path: path.into(),
            offset: byte_offset(text, line, column),
            line,
            column,
            message: err.to_string(),
        }
    }

    /// True for errors caused by bad input data rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Dimension(_) | Error::Parse { .. }
        )
    }
}

// serde_json reports 1-based lines and columns (column counted in bytes).
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
