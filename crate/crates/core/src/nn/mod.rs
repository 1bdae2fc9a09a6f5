//! Minimal neural-network substrate: 3D convolution kernels with explicit
//! backward passes, normalization/pooling/linear layers, parameter
//! bookkeeping, and the single-file weight checkpoint format.
//!
//! Feature maps are `[batch, channel, depth, height, width]` f32 arrays where
//! depth is the out-of-plane (z) axis. All operations are deterministic for a
//! fixed seed regardless of thread count: parallel loops write disjoint,
//! preassigned output regions and every accumulation order is fixed.

mod checkpoint;
mod conv;
mod layers;
mod param;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use conv::{conv3d, conv3d_backward, conv_out_len, conv_transpose3d, Conv3dGrads};
pub use layers::{ChannelNorm, Conv3dLayer, EmbeddingBag, GlobalAvgPool, Linear, MaxPool3d, Relu};
pub use param::{Param, ParamInit};
