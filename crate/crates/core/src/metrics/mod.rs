//! Image quality metrics and the seen/unseen distortion evaluation.

mod eval;
mod quality;

pub use eval::{eval_distortion_seed, evaluate, restore, EvalReport, EvalRow, GapRow};
pub use quality::{psnr, rgb_to_y, ssim, Channel, PSNR_CAP_DB, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
