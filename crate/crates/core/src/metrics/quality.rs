use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Which planes a metric is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    #[default]
    Rgb,
    Y,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Rgb => "rgb",
            Channel::Y => "y",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Channel::Rgb),
            "y" => Ok(Channel::Y),
            _ => Err(Error::InvalidConfig(format!("unknown channel `{s}`"))),
        }
    }
}

fn check_pair(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: op.into(),
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        });
    }
    Ok(())
}

/// Luma `0.299 R + 0.587 G + 0.114 B`.
pub fn rgb_to_y(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "rgb_to_y".into(),
            shapes: vec![s.to_vec()],
        });
    }
    let hw = s[1] * s[2];
    let d = x.data();
    let y = (0..hw)
        .map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i])
        .collect();
    Tensor::new(vec![1, s[1], s[2]], y)
}

fn planes(a: &Tensor, b: &Tensor, channel: Channel) -> Result<(Tensor, Tensor)> {
    match channel {
        Channel::Rgb => Ok((a.clone(), b.clone())),
        Channel::Y => Ok((rgb_to_y(a)?, rgb_to_y(b)?)),
    }
}

/// Peak signal-to-noise ratio in dB for `[c, h, w]` images on `[0, 1]`,
/// capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor, channel: Channel) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let (a, b) = planes(a, b, channel)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable weighted average over every fully contained window.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..k).map(|i| g[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..k).map(|i| g[i] * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let f = |v: &[f64]| filter_valid(v, h, w, &g);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (ma, mb, saa, sbb, sab) = (f(a), f(b), f(&aa), f(&bb), f(&ab));
    let n = ma.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mu_a, mu_b) = (ma[i], mb[i]);
        let va = saa[i] - mu_a * mu_a;
        let vb = sbb[i] - mu_b * mu_b;
        let cov = sab[i] - mu_a * mu_b;
        let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    total / n as f64
}

/// Single-scale SSIM (11x11 Gaussian window, σ = 1.5) averaged over valid
/// window positions; RGB averages the per-channel values.
pub fn ssim(a: &Tensor, b: &Tensor, channel: Channel) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (a, b) = planes(a, b, channel)?;
    let s = a.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidImage(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let hw = h * w;
    let sum: f64 = (0..c)
        .map(|ch| ssim_plane(&a.data()[ch * hw..(ch + 1) * hw], &b.data()[ch * hw..(ch + 1) * hw], h, w))
        .sum();
    Ok(sum / c as f64)
}
