//! Distortion-invariant training for image restoration.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors, a recording graph with reverse-mode
//!   differentiation, and Hessian-vector products.
//! - [`model`]: a small residual convolutional restoration network whose
//!   parameters live in one flat [`autodiff::ParamVector`].
//! - [`degradation`]: synthetic clean images, the distortion family
//!   (noise, blur, block-DCT quantization, hybrids) and batch sampling.
//! - [`optim`]: losses, Adam, and the five training paradigms (ERM plus the
//!   serial/parallel, first/second-order meta-learning variants).
//! - [`metrics`]: PSNR, SSIM and the cross-degree evaluation protocol.

pub mod autodiff;
pub mod degradation;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;

pub use error::{Error, Result};
