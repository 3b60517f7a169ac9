use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    Dimension {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("backward was already run on this tape; record a fresh forward pass first")]
    BackwardConsumed,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: parse error: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{file}:{line}: format error: {message}")]
    Format {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("class {class} has {members} members, fewer than the {folds} requested folds")]
    Stratification {
        class: usize,
        members: usize,
        folds: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn dimension(
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    ) -> Self {
        Error::Dimension {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }
}
