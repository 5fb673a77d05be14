use thiserror::Error;

/// Overflow guard for cumulative log-decays, in natural-log units.
///
/// `exp(709.78)` is the largest finite double; the guard fires well before that.
pub const LOG_DECAY_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LionError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate scaling denominator in row {row}: |{value:e}| < 1e-12")]
    DegenerateRow { row: usize, value: f64 },

    #[error(
        "cumulative log-decay magnitude {magnitude:.1} exceeds the overflow guard of {limit}; \
         use the chunkwise or RNN form for sequences this long"
    )]
    Stability { magnitude: f64, limit: f64 },

    #[error("decay value {value} at position {index} is outside (0, 1]")]
    InvalidDecay { index: usize, value: f64 },

    #[error("missing weight `{0}` for the configured decay family")]
    MissingWeight(&'static str),

    #[error("chunk index ({i}, {j}) out of range for {chunks} chunks")]
    ChunkIndex { i: usize, j: usize, chunks: usize },

    #[error("CSV parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl LionError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LionError::Shape(msg.into())
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LionError::DegenerateRow { .. } | LionError::Stability { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, LionError>;
