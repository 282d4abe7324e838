//! Differentiable operator kit: tensors, a Wengert tape with reverse-mode
//! gradients, Adam, timestep embeddings and the U-Net built from them.

pub mod embed;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod unet;

pub use embed::{time_embedding, time_embedding_batch};
pub use params::{AdamConfig, Moments, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use unet::{UNet, UNetConfig};
