use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing configuration field `{0}`")]
    MissingField(String),

    #[error("degenerate time span: all interactions fall on day {0}")]
    DegenerateSpan(i64),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("loss must be a 1x1 tensor, got {0}x{1}")]
    NonScalarLoss(usize, usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at epoch {epoch}, days {day_start}..={day_end}: {detail}")]
    Diverged {
        epoch: usize,
        day_start: u32,
        day_end: u32,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}
