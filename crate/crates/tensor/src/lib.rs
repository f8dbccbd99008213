//! A deliberately small reverse-mode autodiff engine for single-image
//! convolutional networks on the CPU.
//!
//! Tensors are dense f32 arrays; image-like values use `[C, H, W]` without
//! a batch axis. Kernels split work into independent output chunks via
//! [`par`], running on rayon when the `parallel` feature is enabled and
//! sequentially otherwise, with identical results either way.

pub mod kernels;
pub mod par;
pub mod params;
pub mod tape;
mod tensor;

pub use params::{Adam, ParamId, ParamStore};
pub use tape::{concat, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
