//! Clean images, parametric distortions, and batch sampling over a set of
//! distortion specs.

mod distort;
mod image;
mod jpeg;
mod ppm;
mod sample;
mod spec;
mod synth;

pub use distort::{add_gaussian_noise, apply_distortion, distort, gaussian_blur, gaussian_kernel};
pub use image::{CleanImage, PatchPair};
pub use jpeg::{jpeg_quantize, quant_table, STANDARD_LUMINANCE_TABLE};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use sample::{counterfactual_augment, crop_position, parallel_counts, sample_batch, SamplingMode};
pub use spec::{ConfounderSet, DistortionSpec, HybridLevel};
pub use synth::{synth_clean_image, synth_corpus, MIN_SYNTH_SIZE};
