//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong across the store, trajectory, spectral and
/// extrapolation layers. Variants are grouped by the layer that raises them.
#[derive(Debug, Error)]
pub enum Error {
    // ---- checkpoint store ----
    #[error("series index not found at {0}")]
    MissingIndex(String),
    #[error("invalid series index: {0}")]
    InvalidIndex(String),
    #[error("schema mismatch for tensor {tensor:?} at step {step}: {detail}")]
    SchemaMismatch {
        tensor: String,
        step: u64,
        detail: String,
    },
    #[error("corrupt blob for tensor {tensor:?} at step {step}: stored crc32c {stored:#010x}, computed {computed:#010x}")]
    CorruptBlob {
        tensor: String,
        step: u64,
        stored: u32,
        computed: u32,
    },
    #[error("unknown step {0}")]
    UnknownStep(u64),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("shape mismatch for tensor {tensor:?}: expected {expected} elements, got {got}")]
    ShapeMismatch {
        tensor: String,
        expected: usize,
        got: usize,
    },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("malformed json: {0}")]
    MalformedJson(#[from] serde_json::Error),

    // ---- trajectory ----
    #[error("no observed step at or below cutoff {0}")]
    EmptyWindow(u64),

    // ---- spectral ----
    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("trajectory for tensor {0:?} is identically zero")]
    ZeroTrajectory(String),
    #[error("singular value {index} is below 1e-12 of the leading one; trailing requested components are degenerate")]
    NearZeroSingularValue { index: usize },
    #[error("matrix is not symmetric within tolerance")]
    NotSymmetric,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all abscissa values are equal; line fit is degenerate")]
    DegenerateAbscissa,
    #[error("normal-equations system is singular")]
    SingularSystem,
    #[error("PLS direction is degenerate (centered covariance below 1e-14)")]
    DegenerateDirection,

    // ---- extrapolator ----
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate interval: t0 and t_cut coincide")]
    DegenerateInterval,
    #[error("tensor {0:?} is not a 2-D matrix")]
    NotAMatrix(String),
    #[error("power iteration stalled: relative change {change:e} after {iters} iterations")]
    PowerIterationStall { change: f64, iters: usize },
    #[error("step index {index} out of range for {rows} observed rows")]
    BadStepIndex { index: usize, rows: usize },

    // ---- diagnostics ----
    #[error("step {0} missing from one of the compared series")]
    MissingStep(u64),

    // ---- synth / oracle ----
    #[error("oracle size exceeded: {0}")]
    SizeExceeded(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
