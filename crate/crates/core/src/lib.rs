//! Low-rank decomposition and extrapolation of model checkpoint series.
//!
//! Given an ordered series of checkpoints sharing one tensor schema, this
//! crate builds per-tensor delta trajectories against the base checkpoint,
//! decomposes them with a truncated SVD computed through the small T×T
//! Gram matrix, and either reconstructs observed checkpoints at reduced
//! rank or predicts unseen future checkpoints by fitting a line to the
//! rank-1 coefficient and extending it. Two-endpoint weight-space
//! baselines, a per-checkpoint rank-1 baseline, diagnostic reports and a
//! planted-series generator with independent SVD oracles round out the
//! toolkit.
//!
//! Large tensors are never materialized as full trajectory matrices: every
//! reduction streams over fixed-size column blocks with deterministic
//! pairwise accumulation, so memory stays bounded by one tensor plus the
//! T×T Gram state regardless of model size.

pub mod diagnostics;
pub mod error;
pub mod extrapolate;
pub mod numeric;
pub mod spectral;
pub mod store;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
pub use extrapolate::{fit_rank1, predict, Rank1Model};
pub use spectral::{linear_fit, truncated_svd, LinearFit, SpectralDecomposition};
pub use store::{open_series, read_tensor, CheckpointSeries, Dtype, TensorSpec};
pub use trajectory::{build_trajectory, TrajectoryMatrix};
