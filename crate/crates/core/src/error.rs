use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {0:e} is too small to normalize")]
    ZeroNorm(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("action component {index} = {value} is outside [-1, 1]")]
    OutOfBounds { index: usize, value: f64 },
    #[error("environment must be reset before use")]
    NotReset,

    #[error("requested {requested} frames but buffer capacity is {capacity}")]
    CapacityExceeded { requested: usize, capacity: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic bytes, expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file ends before the declared payload: {0}")]
    Truncated(String),

    #[error("row {row} has norm {norm}, expected unit vectors")]
    NotNormalized { row: usize, norm: f64 },
    #[error("exp overflow: score/epsilon = {0} exceeds 700")]
    Overflow(f64),
    #[error("matrix has a non-positive entry or line sum")]
    NonPositive,

    #[error("shift pad {pad} must be smaller than render size {size}")]
    PadTooLarge { pad: usize, size: usize },
    #[error("denominator {0:e} of the intrinsic loss is degenerate")]
    DegenerateDenominator(f64),

    #[error("candidate batch is empty")]
    EmptyBatch,
    #[error("need at least {k} neighbors but only {available} are available")]
    InsufficientNeighbors { k: usize, available: usize },

    #[error("need more than {k} prototypes, have {m}")]
    TooFewPrototypes { k: usize, m: usize },
    #[error("covariance rank {rank} is below the requested {components} components")]
    RankDeficient { rank: usize, components: usize },

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    ConfigInvalid(Vec<String>),
    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }
}
