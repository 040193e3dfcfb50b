use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A clean RGB image with values in `[0, 1]`, shape `[3, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanImage {
    pixels: Tensor,
    source_id: String,
}

pub(crate) fn check_unit_range(t: &Tensor) -> Result<()> {
    match t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::InvalidImage(format!(
            "value {} at index {i} is outside [0, 1]",
            t.data()[i]
        ))),
        None => Ok(()),
    }
}

pub(crate) fn check_rgb(t: &Tensor) -> Result<()> {
    if t.shape().len() != 3 || t.shape()[0] != 3 {
        return Err(Error::InvalidImage(format!("expected shape [3, h, w], got {:?}", t.shape())));
    }
    Ok(())
}

impl CleanImage {
    pub fn new(pixels: Tensor, source_id: impl Into<String>) -> Result<Self> {
        check_rgb(&pixels)?;
        check_unit_range(&pixels)?;
        Ok(CleanImage {
            pixels: pixels.detach(),
            source_id: source_id.into(),
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// `[3, size, size]` window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Tensor> {
        crop(&self.pixels, top, left, size, size)
    }
}

pub(crate) fn crop(t: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(Error::InvalidImage(format!(
            "crop {ch}x{cw} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    let mut data = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in top..top + ch {
            let row = (k * h + y) * w;
            data.extend_from_slice(&t.data()[row + left..row + left + cw]);
        }
    }
    Tensor::new(vec![c, ch, cw], data)
}

/// A distorted patch with its clean counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub distorted: Tensor,
    pub clean: Tensor,
    /// Zero-based index into the confounder set.
    pub spec_index: usize,
}
