use crate::autodiff::{Graph, ParamVector, Tensor};
use crate::degradation::PatchPair;
use crate::error::{Error, Result};
use crate::model::RestorationNet;

use super::loss::{loss, LossKind};

/// A differentiable training objective over a flat parameter vector.
///
/// The meta-gradient code is written against this trait so the same
/// arithmetic runs on the restoration net and on small closed-form models.
pub trait Objective {
    type Batch: ?Sized;

    fn num_params(&self) -> usize;

    fn loss(&self, theta: &ParamVector, batch: &Self::Batch) -> Result<f64>;

    fn loss_grad(&self, theta: &ParamVector, batch: &Self::Batch) -> Result<(f64, ParamVector)>;
}

/// Mean loss of the restoration net over a batch of patch pairs.
#[derive(Clone, Debug)]
pub struct NetObjective {
    net: RestorationNet,
    kind: LossKind,
}

impl NetObjective {
    pub fn new(net: &RestorationNet, kind: LossKind) -> Self {
        NetObjective {
            net: net.clone(),
            kind,
        }
    }

    fn stack(batch: &[PatchPair]) -> Result<(Tensor, Tensor)> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let x: Vec<&Tensor> = batch.iter().map(|p| &p.distorted).collect();
        let y: Vec<&Tensor> = batch.iter().map(|p| &p.clean).collect();
        Ok((Tensor::stack(&x)?, Tensor::stack(&y)?))
    }

    fn weights(&self, theta: &ParamVector) -> Result<Vec<Tensor>> {
        let params = self.net.params().with_data(theta.data().to_vec())?;
        Ok(params.unflatten().into_iter().map(|(_, t)| t).collect())
    }
}

impl Objective for NetObjective {
    type Batch = [PatchPair];

    fn num_params(&self) -> usize {
        self.net.params().len()
    }

    fn loss(&self, theta: &ParamVector, batch: &[PatchPair]) -> Result<f64> {
        let (x, y) = Self::stack(batch)?;
        let w = self.weights(theta)?;
        let mut eager = crate::autodiff::Eager;
        let pred = self.net.forward_with(&mut eager, &w, &x)?;
        Ok(loss(&mut eager, &pred, &y, self.kind)?.item())
    }

    fn loss_grad(&self, theta: &ParamVector, batch: &[PatchPair]) -> Result<(f64, ParamVector)> {
        let (x, y) = Self::stack(batch)?;
        let w = self.weights(theta)?;
        let mut g = Graph::new();
        let leaves: Vec<Tensor> = w.iter().map(|t| g.leaf(t)).collect();
        let pred = self.net.forward_with(&mut g, &leaves, &x)?;
        let l = loss(&mut g, &pred, &y, self.kind)?;
        let grads = g.backward(&l)?;
        let mut flat = Vec::with_capacity(theta.len());
        for leaf in &leaves {
            flat.extend_from_slice(grads.get(leaf).ok_or(Error::ForeignNode)?.data());
        }
        Ok((l.item(), theta.with_data(flat)?))
    }
}
