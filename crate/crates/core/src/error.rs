use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("basis with {cols} columns already spans R^{rows}; no orthogonal direction exists")]
    RankFull { rows: usize, cols: usize },

    #[error("could not find a non-degenerate orthogonal direction after {retries} attempts")]
    DegenerateInput { retries: usize },

    #[error("adapter {id} is at rank 1 and cannot be pruned")]
    MinRank { id: String },

    #[error("adapter {id} is at its rank limit {r_max} and cannot be expanded")]
    MaxRank { id: String, r_max: usize },

    #[error("stale state: {0}")]
    Stale(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("trace replay failed at line {line}: {message}")]
    Replay { line: usize, message: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
