//! Sliding-window monocular SLAM backend for dynamic scenes.
//!
//! Patch-based bundle adjustment is fused with externally supplied dense depth,
//! confidence, and motion-probability priors. Patches are only spawned on the
//! static part of each keyframe, the per-batch scale of the prior depths is
//! aligned to the current reconstruction, and the depth prior is weighted per
//! frame by the marginal uncertainty of the patch depths.

// `!(x > 0.0)` is used on purpose: it rejects NaN together with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ba;
pub mod geometry;
pub mod provider;
pub mod raster;
pub mod scale;
pub mod eval;
pub mod pipeline;
pub mod sim;
