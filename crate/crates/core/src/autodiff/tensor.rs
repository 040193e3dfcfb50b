use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`](super::Graph).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) graph: u64,
    pub(crate) index: usize,
}

/// Dense row-major array of `f64`, optionally linked to a graph node.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeId>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadLength {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            node: None,
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn from_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeId>) -> Self {
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Mutating breaks the link to any graph
    /// node, so the handle is dropped.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Copy without a graph handle.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape".into(),
                shapes: vec![self.shape.clone(), shape.to_vec()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            node: None,
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::ShapeMismatch {
            op: "stack".into(),
            shapes: vec![],
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack".into(),
                    shapes: items.iter().map(|t| t.shape.clone()).collect(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Slice `index` of the leading axis.
    pub fn index_outer(&self, index: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || index >= self.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "index_outer".into(),
                shapes: vec![self.shape.clone()],
            });
        }
        let inner = self.shape[1..].to_vec();
        let n = numel(&inner);
        Tensor::new(inner, self.data[index * n..(index + 1) * n].to_vec())
    }
}
