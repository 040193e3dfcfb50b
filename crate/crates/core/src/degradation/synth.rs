//! Procedural clean images: smooth gradients, hard-edged shapes, and
//! low-frequency texture.

use std::f64::consts::PI;

use rand::Rng;

use super::image::CleanImage;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed;

pub const MIN_SYNTH_SIZE: usize = 64;

const SINUSOIDS: usize = 4;
const SHAPES: usize = 6;
const NOISE_GRID: usize = 8;

enum Shape {
    Rect { cx: f64, cy: f64, hx: f64, hy: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    /// Signed distance in pixels, negative inside.
    fn sdf(&self, x: f64, y: f64) -> f64 {
        match *self {
            Shape::Rect { cx, cy, hx, hy } => {
                let dx = (x - cx).abs() - hx;
                let dy = (y - cy).abs() - hy;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
            Shape::Disc { cx, cy, r } => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r,
        }
    }
}

/// Deterministic synthetic image of size `h x w` (both at least 64).
pub fn synth_clean_image(seed: u64, h: usize, w: usize) -> Result<CleanImage> {
    if h < MIN_SYNTH_SIZE || w < MIN_SYNTH_SIZE {
        return Err(Error::InvalidImage(format!(
            "synthetic images need at least {MIN_SYNTH_SIZE}x{MIN_SYNTH_SIZE}, got {h}x{w}"
        )));
    }
    let mut rng = seed::rng(seed);
    let (hf, wf) = (h as f64, w as f64);
    let mut px = vec![0.0; 3 * h * w];

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    for c in 0..3 {
        px[c * h * w..(c + 1) * h * w].fill(base[c]);
    }

    for _ in 0..SINUSOIDS {
        let angle = rng.random_range(0.0..2.0 * PI);
        let cycles = rng.random_range(0.5..3.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.12..0.12));
        let (ca, sa) = (angle.cos(), angle.sin());
        for y in 0..h {
            for x in 0..w {
                let t = (x as f64 / wf) * ca + (y as f64 / hf) * sa;
                let s = (2.0 * PI * cycles * t + phase).sin();
                for c in 0..3 {
                    px[(c * h + y) * w + x] += amp[c] * s;
                }
            }
        }
    }

    let min_dim = hf.min(wf);
    for _ in 0..SHAPES {
        let cx = rng.random_range(0.0..wf);
        let cy = rng.random_range(0.0..hf);
        let shape = if rng.random_bool(0.5) {
            Shape::Rect {
                cx,
                cy,
                hx: rng.random_range(0.05..0.25) * min_dim,
                hy: rng.random_range(0.05..0.25) * min_dim,
            }
        } else {
            Shape::Disc {
                cx,
                cy,
                r: rng.random_range(0.05..0.25) * min_dim,
            }
        };
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let opacity = rng.random_range(0.6..1.0);
        for y in 0..h {
            for x in 0..w {
                // pixel centers, one-pixel linear ramp across the edge
                let cov = (0.5 - shape.sdf(x as f64 + 0.5, y as f64 + 0.5)).clamp(0.0, 1.0);
                if cov == 0.0 {
                    continue;
                }
                let a = opacity * cov;
                for c in 0..3 {
                    let p = &mut px[(c * h + y) * w + x];
                    *p = *p * (1.0 - a) + color[c] * a;
                }
            }
        }
    }

    let g = NOISE_GRID;
    let grid: Vec<f64> = (0..3 * g * g).map(|_| rng.random_range(-0.1..0.1)).collect();
    for y in 0..h {
        let gy = y as f64 / (hf - 1.0) * (g - 1) as f64;
        let (y0, ty) = ((gy.floor() as usize).min(g - 2), gy - (gy.floor() as usize).min(g - 2) as f64);
        for x in 0..w {
            let gx = x as f64 / (wf - 1.0) * (g - 1) as f64;
            let (x0, tx) = ((gx.floor() as usize).min(g - 2), gx - (gx.floor() as usize).min(g - 2) as f64);
            for c in 0..3 {
                let at = |yy: usize, xx: usize| grid[(c * g + yy) * g + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                px[(c * h + y) * w + x] += top * (1.0 - ty) + bot * ty;
            }
        }
    }

    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let pixels = Tensor::new(vec![3, h, w], px)?;
    CleanImage::new(pixels, format!("synth-{seed:016x}"))
}

/// `count` images with seeds derived from `seed`.
pub fn synth_corpus(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<CleanImage>> {
    (0..count)
        .map(|i| synth_clean_image(seed::derive(seed, i as u64), h, w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_clean_image(12, 64, 80).unwrap();
        let b = synth_clean_image(12, 64, 80).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels().shape(), &[3, 64, 80]);
        assert!(a.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, synth_clean_image(13, 64, 80).unwrap());
    }

    #[test]
    fn mean_over_seeds_is_mid_gray() {
        let means: Vec<f64> = (0..100)
            .map(|s| {
                let img = synth_clean_image(s, 64, 64).unwrap();
                img.pixels().data().iter().sum::<f64>() / img.pixels().len() as f64
            })
            .collect();
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        assert!((0.35..=0.65).contains(&mean), "{mean}");
    }

    #[test]
    fn too_small_rejected() {
        assert!(synth_clean_image(0, 63, 64).is_err());
        assert!(synth_clean_image(0, 64, 10).is_err());
    }

    #[test]
    fn images_have_structure() {
        let img = synth_clean_image(4, 96, 96).unwrap();
        let d = img.pixels().data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!(std > 0.05, "{std}");
    }
}
