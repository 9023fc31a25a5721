//! Minimal neural-network substrate: named parameter collections and the
//! layer set the encoders/heads are built from (3x3 stride-2 conv, 2x2
//! stride-2 transposed conv, linear, leaky ReLU, global average pooling).
//!
//! Layers are stateless descriptors; parameters live in a [`ParamCollection`]
//! keyed by name, which keeps the optimizer, the EMA update, and the
//! checkpoint format uniform. Every layer provides an explicit backward pass
//! so the whole stack stays deterministic and dependency-free.

mod layers;
pub mod params;

pub use layers::{
    gap, gap_backward, l2norm, l2norm_backward, layer_norm, layer_norm_backward, leaky_relu, leaky_relu_backward, Conv2d,
    ConvTranspose2x2, Linear, Mlp, MlpTrace, NormalizedLinear,
};
pub use params::{ema_update, Param, ParamCollection};

/// Negative slope used by every leaky ReLU in the crate.
pub const LEAK: f32 = 0.01;
