use rand_distr::{Distribution, StandardNormal};

use super::image::{check_rgb, check_unit_range, CleanImage};
use super::jpeg::jpeg_quantize;
use super::spec::DistortionSpec;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// Normalized `k x k` Gaussian kernel with `k = 2 * ceil(3 * sigma) + 1`.
pub fn gaussian_kernel(sigma: f64) -> Result<Tensor> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidSpec(format!("blur sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let k = (2 * radius + 1) as usize;
    let mut data = Vec::with_capacity(k * k);
    for y in -radius..=radius {
        for x in -radius..=radius {
            data.push((-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Tensor::new(vec![k, k], data)
}

/// Per-channel 2-D convolution with reflect padding.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let kernel = gaussian_kernel(sigma)?;
    let k = kernel.shape()[0];
    let r = (k / 2) as isize;
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let reflect = |i: isize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n as isize - 1);
        let m = i.rem_euclid(period);
        (if m >= n as isize { period - m } else { m }) as usize
    };
    let cols: Vec<Vec<usize>> = (0..w as isize)
        .map(|x| (-r..=r).map(|dx| reflect(x + dx, w)).collect())
        .collect();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for (x, xs) in cols.iter().enumerate() {
                let mut acc = 0.0;
                for (ky, dy) in (-r..=r).enumerate() {
                    let row = &plane[reflect(y + dy, h) * w..];
                    let krow = &kernel.data()[ky * k..(ky + 1) * k];
                    for (kv, &sx) in krow.iter().zip(xs) {
                        acc += kv * row[sx];
                    }
                }
                out[ch * h * w + y as usize * w + x] = acc;
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Adds `N(0, (sigma / 255)^2)` noise and clamps to `[0, 1]`.
pub fn add_gaussian_noise(img: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if sigma == 0.0 {
        return Ok(img.detach());
    }
    let std = sigma / 255.0;
    let mut rng = seed::rng(seed);
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (v + std * z).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(img.shape().to_vec(), data)
}

/// Applies `spec` to `[3, h, w]` pixels in `[0, 1]`.
pub fn distort(pixels: &Tensor, spec: &DistortionSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    check_rgb(pixels)?;
    check_unit_range(pixels)?;
    distort_unchecked(pixels, spec, seed)
}

fn distort_unchecked(pixels: &Tensor, spec: &DistortionSpec, seed: u64) -> Result<Tensor> {
    match spec {
        DistortionSpec::Awgn { sigma } => add_gaussian_noise(pixels, *sigma, seed),
        DistortionSpec::GaussianBlur { sigma } => gaussian_blur(pixels, *sigma),
        DistortionSpec::JpegQuant { quality } => jpeg_quantize(pixels, *quality),
        DistortionSpec::Hybrid { stages } => {
            let mut out = pixels.detach();
            for (i, stage) in stages.iter().enumerate() {
                out = distort_unchecked(&out, stage, seed::derive(seed, i as u64))?;
            }
            Ok(out)
        }
    }
}

/// `I_d = g(I_c, d)` for a full image.
pub fn apply_distortion(image: &CleanImage, spec: &DistortionSpec, seed: u64) -> Result<Tensor> {
    distort(image.pixels(), spec, seed)
}
