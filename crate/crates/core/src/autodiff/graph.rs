use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, Op, Operand};
use super::tensor::{NodeId, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
enum NodeKind {
    Leaf,
    Constant,
    Apply(Op),
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<f64>,
    cache: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are stored in creation order, so inputs always precede outputs and
/// the reverse sweep is a plain backwards walk.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Anything that can evaluate an [`Op`]: a recording [`Graph`] or the
/// non-recording [`Eager`] executor.
pub trait Exec {
    fn apply(&mut self, op: &Op, inputs: &[&Tensor]) -> Result<Tensor>;

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        match b {
            Some(b) => self.apply(&Op::Conv2d, &[x, w, b]),
            None => self.apply(&Op::Conv2d, &[x, w]),
        }
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(&Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(&Op::Sub, &[a, b])
    }
    fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(&Op::MulScalar(c), &[a])
    }
    fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(&Op::Relu, &[a])
    }
    fn pad_reflect(&mut self, a: &Tensor, pad: usize) -> Result<Tensor> {
        self.apply(&Op::PadReflect(pad), &[a])
    }
    fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(&Op::Sum, &[a])
    }
    fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(&Op::Mean, &[a])
    }
    fn abs(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(&Op::Abs, &[a])
    }
    fn sqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(&Op::Sqrt, &[a])
    }
    fn square(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(&Op::Square, &[a])
    }
    fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        self.apply(&Op::Clamp { lo, hi }, &[a])
    }
}

/// Evaluates ops without recording them.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Exec for Eager {
    fn apply(&mut self, op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
        forward_op(op, inputs)
    }
}

/// Evaluates `op` on `inputs` without touching any graph.
pub fn forward_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let operands: Vec<Operand<'_>> = inputs.iter().map(|t| (t.shape(), t.data())).collect();
    let f = ops::forward(op, &operands)?;
    Ok(Tensor::with_node(f.shape, f.data, None))
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a differentiable input and returns a linked copy.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let index = self.push(Node {
            kind: NodeKind::Leaf,
            inputs: Vec::new(),
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            cache: None,
            requires_grad: true,
        });
        Tensor::with_node(t.shape().to_vec(), t.data().to_vec(), Some(self.handle(index)))
    }

    fn handle(&self, index: usize) -> NodeId {
        NodeId {
            graph: self.id,
            index,
        }
    }

    fn push(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn resolve(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(id) if id.graph == self.id && id.index < self.nodes.len() => Ok(Some(id.index)),
            Some(_) => Err(Error::ForeignNode),
        }
    }

    /// Sign pattern of every recorded input to a piecewise op (relu, abs,
    /// clamp), folded into a hash. Two evaluations with the same signature
    /// lie on the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            if let NodeKind::Apply(op) = &node.kind {
                if !op.is_piecewise() {
                    continue;
                }
                let input = &self.nodes[node.inputs[0]].value;
                for &v in input {
                    let class = match op {
                        Op::Clamp { lo, hi } => {
                            if v < *lo {
                                0
                            } else if v > *hi {
                                2
                            } else {
                                1
                            }
                        }
                        _ => {
                            if v > 0.0 {
                                2
                            } else if v < 0.0 {
                                0
                            } else {
                                1
                            }
                        }
                    };
                    mix(class);
                }
            }
        }
        h
    }

    /// Reverse sweep from a scalar `loss`. The graph itself is not modified,
    /// so it can be swept again from another output.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = self.resolve(loss)?.ok_or(Error::ForeignNode)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let Some(gy) = grads[i].take() else {
                if matches!(node.kind, NodeKind::Leaf) {
                    leaves.insert(i, Tensor::zeros(&node.shape));
                }
                continue;
            };
            match &node.kind {
                NodeKind::Leaf => {
                    leaves.insert(i, Tensor::with_node(node.shape.clone(), gy, None));
                }
                NodeKind::Constant => {}
                NodeKind::Apply(op) => {
                    if !node.requires_grad {
                        continue;
                    }
                    let operands: Vec<Operand<'_>> = node
                        .inputs
                        .iter()
                        .map(|&j| (self.nodes[j].shape.as_slice(), self.nodes[j].value.as_slice()))
                        .collect();
                    let needs: Vec<bool> =
                        node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
                    let input_grads =
                        ops::backward(op, &operands, &node.value, node.cache.as_deref(), &gy, &needs);
                    for (&j, g) in node.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !self.nodes[j].requires_grad {
                            continue;
                        }
                        match &mut grads[j] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        // leaves recorded after the loss are not reachable from it
        for (i, node) in self.nodes.iter().enumerate().skip(root + 1) {
            if matches!(node.kind, NodeKind::Leaf) {
                leaves.insert(i, Tensor::zeros(&node.shape));
            }
        }
        Ok(Gradients {
            graph: self.id,
            leaves,
        })
    }
}

impl Exec for Graph {
    /// Evaluates `op`; the result is recorded when at least one input is
    /// linked to this graph. Unlinked inputs are captured as constants.
    fn apply(&mut self, op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut linked = Vec::with_capacity(inputs.len());
        for t in inputs {
            linked.push(self.resolve(t)?);
        }
        if linked.iter().all(Option::is_none) {
            return forward_op(op, inputs);
        }
        let operands: Vec<Operand<'_>> = inputs.iter().map(|t| (t.shape(), t.data())).collect();
        let f = ops::forward(op, &operands)?;
        let mut ids = Vec::with_capacity(inputs.len());
        for (t, l) in inputs.iter().zip(linked) {
            let id = match l {
                Some(i) => i,
                None => self.push(Node {
                    kind: NodeKind::Constant,
                    inputs: Vec::new(),
                    shape: t.shape().to_vec(),
                    value: t.data().to_vec(),
                    cache: None,
                    requires_grad: false,
                }),
            };
            ids.push(id);
        }
        let requires_grad = ids.iter().any(|&i| self.nodes[i].requires_grad);
        let index = self.push(Node {
            kind: NodeKind::Apply(op.clone()),
            inputs: ids,
            shape: f.shape.clone(),
            value: f.data.clone(),
            cache: f.cache,
            requires_grad,
        });
        Ok(Tensor::with_node(f.shape, f.data, Some(self.handle(index))))
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf tensor; `None` for constants, intermediate
    /// values, or tensors from another graph.
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        let id = leaf.node()?;
        if id.graph != self.graph {
            return None;
        }
        self.leaves.get(&id.index)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
