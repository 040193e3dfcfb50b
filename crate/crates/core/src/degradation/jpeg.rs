//! Per-channel 8x8 block-DCT quantization (the lossy core of baseline JPEG,
//! without chroma subsampling or entropy coding).

use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Baseline luminance quantization table, row-major.
pub const STANDARD_LUMINANCE_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Scaled table following the libjpeg quality rule.
pub fn quant_table(quality: u32) -> Result<[u16; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidSpec(format!("quality must be in [1, 100], got {quality}")));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut out = [0u16; 64];
    for (o, &q) in out.iter_mut().zip(&STANDARD_LUMINANCE_TABLE) {
        *o = ((q as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(out)
}

/// Orthonormal DCT-II basis, `basis[u * 8 + x]`.
fn dct_basis() -> [f64; 64] {
    let mut b = [0.0; 64];
    for u in 0..8 {
        let c = if u == 0 { (0.125f64).sqrt() } else { 0.5 };
        for x in 0..8 {
            b[u * 8 + x] = c * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    b
}

fn transform(basis: &[f64; 64], block: &[f64; 64], inverse: bool) -> [f64; 64] {
    // forward: B·X·Bᵀ, inverse: Bᵀ·X·B
    let at = |u: usize, x: usize| if inverse { basis[x * 8 + u] } else { basis[u * 8 + x] };
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for y in 0..8 {
            tmp[u * 8 + y] = (0..8).map(|x| at(u, x) * block[x * 8 + y]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|y| tmp[u * 8 + y] * at(v, y)).sum();
        }
    }
    out
}

/// Quantizes every channel of `[c, h, w]` data in `[0, 1]`. Partial edge
/// blocks are completed by edge replication; the result is clamped.
pub fn jpeg_quantize(img: &Tensor, quality: u32) -> Result<Tensor> {
    let table = quant_table(quality)?;
    let basis = dct_basis();
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = img.data().to_vec();
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        block[y * 8 + x] = plane[sy * w + sx] * 255.0 - 128.0;
                    }
                }
                let mut coef = transform(&basis, &block, false);
                for (cv, &q) in coef.iter_mut().zip(&table) {
                    let q = q as f64;
                    *cv = (*cv / q).round() * q;
                }
                let rec = transform(&basis, &coef, true);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        let v = (rec[y * 8 + x] + 128.0) / 255.0;
                        out[ch * h * w + (by + y) * w + bx + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}
