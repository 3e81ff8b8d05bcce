//! Minimal CPU neural-network kernel: `f64` tensors, explicit forward and
//! backward passes, a flat parameter store, and first-order optimizers.
//!
//! There is no autodiff tape. Every layer knows how to push gradients back
//! given its forward input, and containers replay their layers in reverse.
//! All operations are deterministic: parallelism only ever splits work across
//! independent output elements, and reductions run in a fixed order.

mod act;
mod conv;
mod gradcheck;
mod layer;
mod norm;
mod optim;
mod pad;
mod param;
mod pool;

pub use act::{leaky_relu, leaky_relu_backward, tanh_range, tanh_range_backward};
pub use conv::{Conv2d, ConvTranspose2d, PadKind};
pub use gradcheck::{central_diff, max_rel_err};
pub use layer::{Layer, ResBlock, ResChain, Stack, StackTrace};
pub use norm::InstanceNorm2d;
pub use optim::{Optimizer, OptimizerKind, OptimizerState};
pub use pad::{reflect_index, reflect_pad, reflect_pad_backward};
pub use param::{Grads, ParamEntry, ParamId, ParamStore, Params};
pub use pool::{avg_pool_down, avg_pool_down_backward};

/// Batched feature map: (batch, channels, height, width).
pub type Tensor = ndarray::Array4<f64>;
