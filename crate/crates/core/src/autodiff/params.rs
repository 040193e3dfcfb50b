use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with a named, contiguous segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    segments: Vec<Segment>,
    data: Vec<f64>,
}

impl ParamVector {
    /// Lays out `(name, shape)` pairs back to back, all zero.
    pub fn zeros_with_layout<S: Into<String>>(layout: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let segments: Vec<Segment> = layout
            .into_iter()
            .map(|(name, shape)| {
                let seg = Segment {
                    name: name.into(),
                    shape,
                    offset,
                };
                offset += seg.len();
                seg
            })
            .collect();
        ParamVector {
            segments,
            data: vec![0.0; offset],
        }
    }

    /// An unnamed single-segment vector.
    pub fn from_flat(data: Vec<f64>) -> Self {
        ParamVector {
            segments: vec![Segment {
                name: "flat".into(),
                shape: vec![data.len()],
                offset: 0,
            }],
            data,
        }
    }

    /// Flattens named tensors in order.
    pub fn flatten<S: Into<String>>(tensors: impl IntoIterator<Item = (S, Tensor)>) -> Self {
        let mut segments = Vec::new();
        let mut data = Vec::new();
        for (name, t) in tensors {
            segments.push(Segment {
                name: name.into(),
                shape: t.shape().to_vec(),
                offset: data.len(),
            });
            data.extend_from_slice(t.data());
        }
        ParamVector { segments, data }
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.segments
            .iter()
            .map(|s| {
                let t = Tensor::from_slice(&s.shape, &self.data[s.range()])
                    .expect("segment layout is consistent");
                (s.name.clone(), t)
            })
            .collect()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    /// Same layout, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<ParamVector> {
        if data.len() != self.data.len() {
            return Err(Error::LengthMismatch {
                expected: self.data.len(),
                got: data.len(),
            });
        }
        Ok(ParamVector {
            segments: self.segments.clone(),
            data,
        })
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            segments: self.segments.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub(crate) fn check_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &ParamVector, scale: f64) -> Result<ParamVector> {
        self.check_len(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        self.with_data(data)
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        self.with_data(data)
    }

    pub fn scale(&self, s: f64) -> ParamVector {
        ParamVector {
            segments: self.segments.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
