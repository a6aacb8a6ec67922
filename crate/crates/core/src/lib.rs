//! James-Stein enhanced normalization layers.
//!
//! Batch and layer normalization estimate one mean and one variance per
//! channel. Viewed jointly, those `c` estimates are exactly the setting in
//! which the sample mean is inadmissible for `c >= 3`; this crate shrinks
//! both statistic vectors toward the origin with the James-Stein factor
//! before standardizing, and ships everything needed to trust that:
//!
//! * [`tensor`]: a small dense NCHW tensor with the reductions the layers use.
//! * [`shrinkage`]: the James-Stein kernel, Ridge/LASSO penalties and the
//!   loss-proportional penalty weight.
//! * [`norm`]: JSNorm batch/layer normalization, forward and hand-derived
//!   backward, plus a plain reference batch norm.
//! * [`gradcheck`]: a central-difference oracle for every backward pass.
//! * [`risk`]: a Monte Carlo laboratory for Stein's paradox.
//! * [`train`]: a toy network, synthetic datasets and an SGD harness.

pub mod error;
pub mod gradcheck;
pub mod norm;
pub mod random;
pub mod risk;
pub mod shrinkage;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use norm::{ForwardCache, NormParams, RunningStats};
pub use shrinkage::{PenaltyKind, ShrinkKind, ShrinkPolicy, ShrinkTarget};
pub use tensor::{Axis, ChannelVector, Tensor};
pub use train::{Dataset, DatasetSpec, NetSpec, RunMetrics, ToyNet, TrainConfig};
