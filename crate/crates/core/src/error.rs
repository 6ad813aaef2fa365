use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: value outside numeric domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("masked softmax: row {row} has no admissible entry")]
    DegenerateRow { row: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("edge KL is infinite: prior assigns zero mass to class {class} where the posterior does not")]
    InfiniteKl { class: usize },

    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("training diverged at epoch {epoch} (loss {loss}); parameters restored to epoch {restored}")]
    Divergence {
        epoch: usize,
        loss: f64,
        restored: usize,
    },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("parse error in {path}: line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("class {0} not present in dataset")]
    MissingClass(u8),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
