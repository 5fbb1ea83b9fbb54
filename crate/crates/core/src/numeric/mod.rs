//! Dense arrays, reverse-mode differentiation, layers and the optimizer.

mod adamw;
pub(crate) mod kernels;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use layers::{Conv2d, GroupNorm, Init, Linear};
pub use params::{ParamStore, PIPELINE_VERSION};
pub use tape::{forward_eval, ConvOpts, Gradients, NodeId, PoolOpts, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
