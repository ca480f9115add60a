use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    Shape {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate time matrix: norm {norm:e} is not above the floor {floor:e}")]
    DegenerateTime { norm: f64, floor: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{kind} id {id} out of range for vocabulary of size {size}")]
    Vocab {
        kind: &'static str,
        id: usize,
        size: usize,
    },

    #[error("sequence length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus {} contains no sentences", path.display())]
    EmptyCorpus { path: PathBuf },

    #[error("word '{word}' does not occur at time point {time}")]
    AbsentWord { word: String, time: String },

    #[error("checkpoint format version {found} does not match supported version {expected}")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("degenerate vector: cosine distance is undefined for a zero vector")]
    DegenerateVector,

    #[error("degenerate metric input: {0}")]
    DegenerateMetric(String),

    #[error("evaluation needs at least 3 scored words, got {0}")]
    TooFewScored(usize),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
