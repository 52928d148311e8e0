//! loopkit: LiDAR loop closing and relocalization.
//!
//! The crate implements a full place-recognition and registration pipeline
//! for spinning-LiDAR point clouds, plus a small odometry/SLAM harness that
//! consumes it:
//!
//! - [`compute`]: tape-based reverse-mode differentiation over `f64`
//!   tensors, the substrate for every learned block.
//! - [`geometry`]: point clouds, rigid transforms, kd-tree, grid
//!   subsampling, SE(3) exp/log.
//! - [`backbone`]: hierarchical kernel-point-convolution encoder/decoder.
//! - [`roformer`]: rotary-position transformer blocks that mix features
//!   across the two clouds of a pair.
//! - [`votes`]: per-point center voting and patch construction.
//! - [`retrieval`]: global descriptor head (soft-assignment pooling plus
//!   context gating) and the descriptor database.
//! - [`matching`]: optimal-transport patch matching and dense
//!   point-correspondence extraction.
//! - [`registration`]: weighted SVD, local-to-global registration, RANSAC
//!   baseline, pose metrics.
//! - [`losses`]: training losses, the Adam optimizer, and the two-stage
//!   training loop.
//! - [`pipeline`]: the assembled model with its configuration presets.
//! - [`slam`]: point-to-plane ICP odometry, keyframing, relocalization,
//!   loop closing, and pose-graph optimization.
//! - [`harness`]: synthetic scene generation, dataset IO, oracles, and
//!   evaluation metrics.

pub mod backbone;
pub mod compute;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod pipeline;
pub mod registration;
pub mod retrieval;
pub mod roformer;
pub mod slam;
pub mod votes;

pub use compute::{Graph, ParamStore, TensorId};
pub use geometry::{PointCloud, RigidTransform};
