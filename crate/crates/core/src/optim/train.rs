use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::loss::LossKind;
use super::meta::{self, VirtualMode};
use super::objective::{NetObjective, Objective};
use crate::autodiff::{HvpMethod, ParamVector};
use crate::degradation::{sample_batch, CleanImage, ConfounderSet, PatchPair, SamplingMode};
use crate::error::{Error, Result};
use crate::model::RestorationNet;
use crate::seed;

const TAG_STEP: u64 = 0x5354_4550;
const TAG_OUTER: u64 = 0;
const TAG_INNER: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Erm,
    DilSf,
    DilPf,
    DilSs,
    DilPs,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Erm, Variant::DilSf, Variant::DilPf, Variant::DilSs, Variant::DilPs];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Erm => "erm",
            Variant::DilSf => "dil_sf",
            Variant::DilPf => "dil_pf",
            Variant::DilSs => "dil_ss",
            Variant::DilPs => "dil_ps",
        }
    }

    pub fn has_inner_losses(self) -> bool {
        self != Variant::Erm
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

/// Optimizer for the virtual steps of the first-order variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VirtualOptimizer {
    Sgd,
    #[default]
    Adam,
}

/// Outer step of the first-order variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstOrderOuter {
    /// Outer Adam fed with `θ − θ̃` as the gradient.
    #[default]
    Adam,
    /// `θ ← θ + β(θ̃ − θ)`.
    Interpolate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub alpha: f64,
    pub beta: f64,
    /// Confounder count; when set it must match the training set.
    pub n: Option<usize>,
    pub loss: LossKind,
    pub iters: usize,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub inner_steps_pf: usize,
    pub virtual_optimizer: VirtualOptimizer,
    pub first_order_outer: FirstOrderOuter,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Erm,
            alpha: 1e-3,
            beta: 1e-3,
            n: None,
            loss: LossKind::default(),
            iters: 3000,
            batch: 8,
            patch: 32,
            seed: 0,
            inner_steps_pf: 2,
            virtual_optimizer: VirtualOptimizer::Adam,
            first_order_outer: FirstOrderOuter::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad(format!("beta must be finite and positive, got {}", self.beta));
        }
        if self.batch == 0 || self.patch == 0 {
            return bad("batch and patch must be positive".into());
        }
        if self.variant == Variant::DilPf && self.inner_steps_pf == 0 {
            return bad("inner_steps_pf must be positive".into());
        }
        if self.n == Some(0) {
            return bad("n must be positive".into());
        }
        self.loss.validate()
    }

    /// Checks the config against a confounder set as well.
    pub fn validate_for(&self, set: &ConfounderSet) -> Result<()> {
        self.validate()?;
        if let Some(n) = self.n {
            if n != set.len() {
                return Err(Error::InvalidConfig(format!(
                    "n = {n} but the confounder set has {} entries",
                    set.len()
                )));
            }
        }
        if matches!(self.variant, Variant::DilPs | Variant::DilPf) && self.batch < set.len() {
            return Err(Error::InvalidConfig(format!(
                "parallel sampling needs batch >= n ({} < {})",
                self.batch,
                set.len()
            )));
        }
        Ok(())
    }
}

/// Multiplier on every learning rate at `iteration` (zero-based): halved at
/// half and again at three quarters of `iters`.
pub fn lr_factor(iteration: usize, iters: usize) -> f64 {
    if iteration < iters / 2 {
        1.0
    } else if iteration < iters * 3 / 4 {
        0.5
    } else {
        0.25
    }
}

/// Outer learning rate at every iteration.
pub fn lr_trace(config: &TrainConfig) -> Vec<f64> {
    (0..config.iters).map(|i| config.beta * lr_factor(i, config.iters)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    /// ERM and second-order variants: loss on the outer batch (at the
    /// virtual parameters for the latter). First-order variants have no
    /// outer batch and report the mean of their inner losses.
    pub outer_loss: f64,
    pub per_confounder_inner_loss: Vec<f64>,
    /// Norm of the outer gradient; `‖θ − θ̃‖` for first-order variants.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Everything besides the parameters that a run needs to resume exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub iteration: usize,
    pub outer: AdamState,
    pub virtual_adam: AdamState,
}

impl OptimState {
    pub fn new(config: &TrainConfig, num_params: usize) -> Self {
        OptimState {
            iteration: 0,
            outer: AdamState::outer(num_params, config.beta),
            virtual_adam: AdamState::virtual_update(num_params, config.alpha),
        }
    }
}

/// Seed of the `k`-th inner batch of `iteration`.
pub fn inner_batch_seed(config: &TrainConfig, iteration: usize, k: usize) -> u64 {
    seed::derive_path(config.seed, &[TAG_STEP, iteration as u64, TAG_INNER, k as u64])
}

pub fn outer_batch_seed(config: &TrainConfig, iteration: usize) -> u64 {
    seed::derive_path(config.seed, &[TAG_STEP, iteration as u64, TAG_OUTER])
}

/// Splits a parallel batch into per-confounder groups; input is grouped by
/// index already.
fn groups_of(batch: &[PatchPair], n: usize) -> Vec<&[PatchPair]> {
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let end = start + batch[start..].iter().take_while(|p| p.spec_index == i).count();
        if end > start {
            out.push(&batch[start..end]);
        }
        start = end;
    }
    out
}

struct Ctx<'a> {
    images: &'a [CleanImage],
    set: &'a ConfounderSet,
    config: &'a TrainConfig,
    iteration: usize,
    factor: f64,
}

impl Ctx<'_> {
    fn sample(&self, mode: SamplingMode, seed: u64) -> Result<Vec<PatchPair>> {
        sample_batch(self.images, self.set, mode, self.config.batch, self.config.patch, seed)
    }

    fn outer_batch(&self) -> Result<Vec<PatchPair>> {
        self.sample(SamplingMode::Outer, outer_batch_seed(self.config, self.iteration))
    }

    fn inner_batch(&self, mode: SamplingMode, k: usize) -> Result<Vec<PatchPair>> {
        self.sample(mode, inner_batch_seed(self.config, self.iteration, k))
    }

    fn alpha(&self) -> f64 {
        self.config.alpha * self.factor
    }

    fn beta(&self) -> f64 {
        self.config.beta * self.factor
    }
}

fn begin<'a>(
    variant: Variant,
    images: &'a [CleanImage],
    set: &'a ConfounderSet,
    config: &'a TrainConfig,
    state: &OptimState,
) -> Result<Ctx<'a>> {
    if config.variant != variant {
        return Err(Error::InvalidConfig(format!(
            "{variant} step called with variant {}",
            config.variant
        )));
    }
    config.validate_for(set)?;
    Ok(Ctx {
        images,
        set,
        config,
        iteration: state.iteration,
        factor: lr_factor(state.iteration, config.iters),
    })
}

fn outer_adam(net: &mut RestorationNet, state: &mut OptimState, grad: &ParamVector, lr: f64) -> Result<()> {
    let theta = state.outer.step_with_lr(net.params(), grad, lr)?;
    *net = net.with_params(&theta)?;
    Ok(())
}

fn finish(ctx: &Ctx<'_>, state: &mut OptimState, outer_loss: f64, inner: Vec<f64>, grad_norm: f64) -> Result<StepReport> {
    let report = StepReport {
        iteration: ctx.iteration,
        outer_loss,
        per_confounder_inner_loss: inner,
        grad_norm,
        lr: ctx.beta(),
    };
    crate::error::check_finite("step report", &[outer_loss, grad_norm])?;
    crate::error::check_finite("inner losses", &report.per_confounder_inner_loss)?;
    state.iteration += 1;
    Ok(report)
}

/// Plain training: one Adam step on an outer batch.
pub fn erm_step(
    net: &mut RestorationNet,
    images: &[CleanImage],
    set: &ConfounderSet,
    config: &TrainConfig,
    state: &mut OptimState,
) -> Result<StepReport> {
    let ctx = begin(Variant::Erm, images, set, config, state)?;
    let obj = NetObjective::new(net, config.loss);
    let outer = ctx.outer_batch()?;
    let (loss, grad) = obj.loss_grad(net.params(), &outer)?;
    outer_adam(net, state, &grad, ctx.beta())?;
    finish(&ctx, state, loss, Vec::new(), grad.norm())
}

/// Parallel sampling, second order.
pub fn dil_ps_step(
    net: &mut RestorationNet,
    images: &[CleanImage],
    set: &ConfounderSet,
    config: &TrainConfig,
    state: &mut OptimState,
) -> Result<StepReport> {
    let ctx = begin(Variant::DilPs, images, set, config, state)?;
    let obj = NetObjective::new(net, config.loss);
    let outer = ctx.outer_batch()?;
    let inner = ctx.inner_batch(SamplingMode::Parallel, 0)?;
    let groups = groups_of(&inner, set.len());
    let m = meta::parallel_meta_gradient(&obj, net.params(), &groups, &outer, ctx.alpha(), HvpMethod::FiniteDiff)?;
    outer_adam(net, state, &m.grad, ctx.beta())?;
    finish(&ctx, state, m.outer_loss, m.inner_losses, m.grad.norm())
}

/// Serial sampling, second order.
pub fn dil_ss_step(
    net: &mut RestorationNet,
    images: &[CleanImage],
    set: &ConfounderSet,
    config: &TrainConfig,
    state: &mut OptimState,
) -> Result<StepReport> {
    let ctx = begin(Variant::DilSs, images, set, config, state)?;
    let obj = NetObjective::new(net, config.loss);
    let outer = ctx.outer_batch()?;
    let batches = (0..set.len())
        .map(|i| ctx.inner_batch(SamplingMode::Serial(i), i))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[PatchPair]> = batches.iter().map(Vec::as_slice).collect();
    let m = meta::serial_meta_gradient(&obj, net.params(), &refs, &outer, ctx.alpha(), HvpMethod::FiniteDiff)?;
    outer_adam(net, state, &m.grad, ctx.beta())?;
    finish(&ctx, state, m.outer_loss, m.inner_losses, m.grad.norm())
}

fn first_order_outer(
    ctx: &Ctx<'_>,
    net: &mut RestorationNet,
    state: &mut OptimState,
    theta_tilde: &ParamVector,
) -> Result<f64> {
    let diff = net.params().sub(theta_tilde)?;
    match ctx.config.first_order_outer {
        FirstOrderOuter::Adam => outer_adam(net, state, &diff, ctx.beta())?,
        FirstOrderOuter::Interpolate => {
            let theta = meta::interpolate(net.params(), theta_tilde, ctx.beta())?;
            *net = net.with_params(&theta)?;
        }
    }
    Ok(diff.norm())
}

fn virtual_step(
    ctx: &Ctx<'_>,
    obj: &NetObjective,
    state: &mut OptimState,
    theta: &ParamVector,
    groups: &[&[PatchPair]],
) -> Result<meta::VirtualStep> {
    let mode = match ctx.config.virtual_optimizer {
        VirtualOptimizer::Sgd => VirtualMode::Sgd,
        VirtualOptimizer::Adam => VirtualMode::Adam(&mut state.virtual_adam),
    };
    meta::virtual_update(obj, theta, groups, ctx.alpha(), mode)
}

/// Parallel sampling, first order: `inner_steps_pf` virtual steps on the
/// averaged loss, then an outer step towards the result.
pub fn dil_pf_step(
    net: &mut RestorationNet,
    images: &[CleanImage],
    set: &ConfounderSet,
    config: &TrainConfig,
    state: &mut OptimState,
) -> Result<StepReport> {
    let ctx = begin(Variant::DilPf, images, set, config, state)?;
    let obj = NetObjective::new(net, config.loss);
    let n = set.len();
    let mut tilde = net.params().clone();
    let mut inner = vec![0.0; n];
    for k in 0..config.inner_steps_pf {
        let batch = ctx.inner_batch(SamplingMode::Parallel, k)?;
        let groups = groups_of(&batch, n);
        let step = virtual_step(&ctx, &obj, state, &tilde, &groups)?;
        for (acc, l) in inner.iter_mut().zip(&step.loss.per_group) {
            *acc += l / config.inner_steps_pf as f64;
        }
        tilde = step.phi;
    }
    let norm = first_order_outer(&ctx, net, state, &tilde)?;
    let mean = inner.iter().sum::<f64>() / n as f64;
    finish(&ctx, state, mean, inner, norm)
}

/// Serial sampling, first order: one virtual step per confounder in index
/// order, then an outer step towards the result.
pub fn dil_sf_step(
    net: &mut RestorationNet,
    images: &[CleanImage],
    set: &ConfounderSet,
    config: &TrainConfig,
    state: &mut OptimState,
) -> Result<StepReport> {
    let ctx = begin(Variant::DilSf, images, set, config, state)?;
    let obj = NetObjective::new(net, config.loss);
    let n = set.len();
    let mut tilde = net.params().clone();
    let mut inner = Vec::with_capacity(n);
    for i in 0..n {
        let batch = ctx.inner_batch(SamplingMode::Serial(i), i)?;
        let step = virtual_step(&ctx, &obj, state, &tilde, &[&batch])?;
        inner.push(step.loss.mean);
        tilde = step.phi;
    }
    let norm = first_order_outer(&ctx, net, state, &tilde)?;
    let mean = inner.iter().sum::<f64>() / n as f64;
    finish(&ctx, state, mean, inner, norm)
}

/// One step of `config.variant`.
pub fn step(
    net: &mut RestorationNet,
    images: &[CleanImage],
    set: &ConfounderSet,
    config: &TrainConfig,
    state: &mut OptimState,
) -> Result<StepReport> {
    let f = match config.variant {
        Variant::Erm => erm_step,
        Variant::DilSf => dil_sf_step,
        Variant::DilPf => dil_pf_step,
        Variant::DilSs => dil_ss_step,
        Variant::DilPs => dil_ps_step,
    };
    f(net, images, set, config, state)
}

#[derive(Debug)]
pub struct TrainRun {
    pub net: RestorationNet,
    pub state: OptimState,
    pub reports: Vec<StepReport>,
    /// Set when a step failed; `reports` then holds the steps that finished.
    pub abort: Option<Error>,
}

/// Runs `config.iters` steps from scratch.
pub fn train(net: RestorationNet, images: &[CleanImage], set: &ConfounderSet, config: &TrainConfig) -> Result<TrainRun> {
    let state = OptimState::new(config, net.params().len());
    train_from(net, images, set, config, state, |_, _, _| Ok(()))
}

/// Continues from `state` until `config.iters` steps have run, calling
/// `observer` after every step.
pub fn train_from<F>(
    net: RestorationNet,
    images: &[CleanImage],
    set: &ConfounderSet,
    config: &TrainConfig,
    state: OptimState,
    observer: F,
) -> Result<TrainRun>
where
    F: FnMut(&StepReport, &RestorationNet, &OptimState) -> Result<()>,
{
    train_until(net, images, set, config, state, config.iters, observer)
}

/// Like [`train_from`] but stops once `until` steps (capped at
/// `config.iters`) have run. The schedule still spans `config.iters`, so a
/// run stopped early and resumed later matches an uninterrupted one.
pub fn train_until<F>(
    mut net: RestorationNet,
    images: &[CleanImage],
    set: &ConfounderSet,
    config: &TrainConfig,
    mut state: OptimState,
    until: usize,
    mut observer: F,
) -> Result<TrainRun>
where
    F: FnMut(&StepReport, &RestorationNet, &OptimState) -> Result<()>,
{
    config.validate_for(set)?;
    if images.is_empty() {
        return Err(Error::InvalidConfig("no training images".into()));
    }
    if state.outer.m.len() != net.params().len() || state.virtual_adam.m.len() != net.params().len() {
        return Err(Error::LengthMismatch {
            expected: net.params().len(),
            got: state.outer.m.len(),
        });
    }
    let mut reports = Vec::new();
    let mut abort = None;
    while state.iteration < until.min(config.iters) {
        let r = step(&mut net, images, set, config, &mut state).and_then(|r| {
            observer(&r, &net, &state)?;
            Ok(r)
        });
        match r {
            Ok(r) => reports.push(r),
            Err(e) => {
                abort = Some(e);
                break;
            }
        }
    }
    Ok(TrainRun {
        net,
        state,
        reports,
        abort,
    })
}
