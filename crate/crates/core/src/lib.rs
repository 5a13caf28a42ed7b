//! Visual difference attention (VDA) and the differentiable
//! difference-attention (DiDA) objective on a small convolutional encoder.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: `f64` tensors with reverse-mode autodiff and double backprop
//! - [`encoder`]: stride-2 CNN with sigmoid feature head and checkpoints
//! - [`scene`]: synthetic scenes with exact saliency masks, PPM/PGM I/O
//! - [`attention`]: masking, difference signals, attention maps, DiDA loss
//! - [`train`]: optimizers, training loop, IoU evaluation, GrabCut seeds
//! - [`gradcheck`]: finite-difference audits of every gradient path
//! - [`par`]: sequential or rayon-backed execution

pub mod attention;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod par;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{backward, Tensor, TensorError};
