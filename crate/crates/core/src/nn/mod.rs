//! CNN building blocks with mask-filter instrumentation.
//!
//! Every convolution and linear layer can carry an all-ones mask `M` that is
//! Hadamard-multiplied with its weights before use. The mask never trains;
//! its gradient, accumulated over a measurement window, is the per-weight
//! influence read out by [`crate::influence`]. A per-output-channel gate
//! multiplies the layer's activations ("false pruning") so strategies can be
//! applied and reverted without touching weights.

mod batchnorm;
mod functional;
mod masked;
mod model;
mod optim;

pub use batchnorm::BatchNorm;
pub use functional::{global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, relu, softmax_cross_entropy};
pub use masked::{Instrumentation, MaskedConv, MaskedLayer, MaskedLinear};
pub use model::{Arch, ConvUnit, Layer, LinearUnit, Model, ResidualBlock, SlotKind, SlotPath};
pub use optim::{sgd_step, Param};

use serde::{Deserialize, Serialize};

/// Gates below this value freeze their filter: no SGD update, no BN
/// running-statistics update.
pub const FREEZE_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}
