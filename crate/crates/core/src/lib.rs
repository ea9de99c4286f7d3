//! Partition-based sparse attention.
//!
//! Keys are clustered with spherical k-means on de-roped vectors and stored in
//! an inverted file. At query time a router picks `ℓ` buckets, and attention is
//! computed exactly over a dense sink-plus-recent window and every key of the
//! visited buckets, merged through online-softmax accumulators.

pub mod attention;
pub mod baselines;
pub mod error;
pub mod format;
pub mod harness;
pub mod partition;
pub mod qmodel;
pub mod rng;
pub mod rope;
pub mod synth;
pub mod tensor;

pub use error::{Result, SaapError};
pub use partition::{build_ivf, kmeans_train, IvfIndex, KeyAssignment, Partition};
pub use rng::SeededRng;
pub use rope::{rope_apply, rope_remove, RopeConfig};
pub use tensor::{matmul_scaled, Matrix, TensorBlock};
