//! Virtual updates and meta-gradients, generic over [`Objective`].

use super::adam::AdamState;
use super::objective::Objective;
use crate::autodiff::{hvp, HvpMethod, ParamVector};
use crate::error::{Error, Result};

pub enum VirtualMode<'a> {
    /// `φ = θ − α∇L(θ)`.
    Sgd,
    /// One step of the given Adam state with learning rate α.
    Adam(&'a mut AdamState),
}

/// Per-group losses, their mean, and the mean gradient, all at `theta`.
#[derive(Clone, Debug)]
pub struct GroupLoss {
    pub mean: f64,
    pub per_group: Vec<f64>,
    pub grad: ParamVector,
}

/// `(1/n) Σ L(θ; group_i)` and its gradient. Contributions are summed in
/// index order.
pub fn mean_loss_grad<O: Objective>(obj: &O, theta: &ParamVector, groups: &[&O::Batch]) -> Result<GroupLoss> {
    if groups.is_empty() {
        return Err(Error::InvalidConfig("no batches to average".into()));
    }
    let mut per_group = Vec::with_capacity(groups.len());
    let mut acc: Option<ParamVector> = None;
    for batch in groups {
        let (l, g) = obj.loss_grad(theta, batch)?;
        per_group.push(l);
        acc = Some(match acc {
            None => g,
            Some(a) => a.add_scaled(&g, 1.0)?,
        });
    }
    let n = groups.len() as f64;
    let grad = acc.expect("non-empty").scale(1.0 / n);
    let mean = per_group.iter().sum::<f64>() / n;
    Ok(GroupLoss { mean, per_group, grad })
}

#[derive(Clone, Debug)]
pub struct VirtualStep {
    pub phi: ParamVector,
    /// Inner losses at the starting point.
    pub loss: GroupLoss,
}

/// Virtual update on the averaged loss of `groups`. `theta` is not touched.
pub fn virtual_update<O: Objective>(
    obj: &O,
    theta: &ParamVector,
    groups: &[&O::Batch],
    alpha: f64,
    mode: VirtualMode<'_>,
) -> Result<VirtualStep> {
    let loss = mean_loss_grad(obj, theta, groups)?;
    let phi = match mode {
        VirtualMode::Sgd => theta.add_scaled(&loss.grad, -alpha)?,
        VirtualMode::Adam(state) => state.step_with_lr(theta, &loss.grad, alpha)?,
    };
    Ok(VirtualStep { phi, loss })
}

#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grad: ParamVector,
    /// Mean outer loss at the virtually updated parameters.
    pub outer_loss: f64,
    /// Inner loss per group (parallel) or per branch (serial) at `theta`.
    pub inner_losses: Vec<f64>,
}

/// Gradient of `L_out(θ − α∇L̄_in(θ))` where `L̄_in` averages `inner`:
/// `(I − α H_in) ∇L_out(φ)`, with the Hessian product taken by `method`.
pub fn second_order_gradient<O: Objective>(
    obj: &O,
    theta: &ParamVector,
    inner: &[&O::Batch],
    outer: &O::Batch,
    alpha: f64,
    method: HvpMethod,
) -> Result<MetaGradient> {
    let step = virtual_update(obj, theta, inner, alpha, VirtualMode::Sgd)?;
    let (outer_loss, u) = obj.loss_grad(&step.phi, outer)?;
    let hu = hvp(|t| Ok(mean_loss_grad(obj, t, inner)?.grad), theta, &u, method)?;
    Ok(MetaGradient {
        grad: u.add_scaled(&hu, -alpha)?,
        outer_loss,
        inner_losses: step.loss.per_group,
    })
}

/// Parallel sampling: one virtual update on the loss averaged over all
/// confounder groups.
pub fn parallel_meta_gradient<O: Objective>(
    obj: &O,
    theta: &ParamVector,
    groups: &[&O::Batch],
    outer: &O::Batch,
    alpha: f64,
    method: HvpMethod,
) -> Result<MetaGradient> {
    second_order_gradient(obj, theta, groups, outer, alpha, method)
}

/// Serial sampling: one virtual update per confounder batch, meta-gradients
/// averaged in index order.
pub fn serial_meta_gradient<O: Objective>(
    obj: &O,
    theta: &ParamVector,
    batches: &[&O::Batch],
    outer: &O::Batch,
    alpha: f64,
    method: HvpMethod,
) -> Result<MetaGradient> {
    if batches.is_empty() {
        return Err(Error::InvalidConfig("no confounder batches".into()));
    }
    let mut acc: Option<ParamVector> = None;
    let mut outer_sum = 0.0;
    let mut inner_losses = Vec::with_capacity(batches.len());
    for b in batches {
        let m = second_order_gradient(obj, theta, std::slice::from_ref(b), outer, alpha, method)?;
        outer_sum += m.outer_loss;
        inner_losses.push(m.inner_losses[0]);
        acc = Some(match acc {
            None => m.grad,
            Some(a) => a.add_scaled(&m.grad, 1.0)?,
        });
    }
    let n = batches.len() as f64;
    Ok(MetaGradient {
        grad: acc.expect("non-empty").scale(1.0 / n),
        outer_loss: outer_sum / n,
        inner_losses,
    })
}

/// `θ + β(θ̃ − θ)`.
pub fn interpolate(theta: &ParamVector, theta_tilde: &ParamVector, beta: f64) -> Result<ParamVector> {
    theta.add_scaled(&theta_tilde.sub(theta)?, beta)
}
