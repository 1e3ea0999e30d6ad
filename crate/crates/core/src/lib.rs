//! Synthesis of moire-degraded screen photographs, two-scale restoration
//! networks trained on a from-scratch differentiable core, and PSNR/SSIM
//! evaluation.

pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod threads;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::{Graph, Tensor, Var};
