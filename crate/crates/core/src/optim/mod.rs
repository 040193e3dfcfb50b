//! Losses, Adam, and the training paradigms: ERM and the four
//! distortion-invariant variants (serial or parallel confounder sampling,
//! first- or second-order outer gradients).

mod adam;
mod loss;
pub mod meta;
mod objective;
mod state_io;
mod train;

pub use adam::{AdamState, ADAM_EPS};
pub use loss::{loss, LossKind, CHARBONNIER_EPSILON};
pub use objective::{NetObjective, Objective};
pub use state_io::{read_optim_state, write_optim_state, OPTIM_HEADER};
pub use train::{
    dil_pf_step, dil_ps_step, dil_sf_step, dil_ss_step, erm_step, inner_batch_seed, lr_factor, lr_trace,
    outer_batch_seed, step, train, train_from, train_until, FirstOrderOuter, OptimState, StepReport, TrainConfig, TrainRun,
    Variant, VirtualOptimizer,
};
