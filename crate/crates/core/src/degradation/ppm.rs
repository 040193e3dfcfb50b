//! Binary PPM (P6, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use super::image::check_rgb;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn fmt_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "ppm",
        reason: reason.into(),
    }
}

/// Encodes a `[3, h, w]` tensor in `[0, 1]`; values are rounded to the
/// nearest of 256 levels after clamping.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    check_rgb(img)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(fmt_err("not a binary P6 file"));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| fmt_err(format!("bad header field {s:?}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(fmt_err(format!("maxval {maxval} unsupported")));
    }
    // exactly one whitespace byte separates header from raster
    let start = pos + 1;
    let need = 3 * h * w;
    if bytes.len() < start + need {
        return Err(fmt_err(format!("raster has {} bytes, expected {need}", bytes.len().saturating_sub(start))));
    }
    let raster = &bytes[start..start + need];
    let mut data = vec![0.0; need];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = raster[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}
