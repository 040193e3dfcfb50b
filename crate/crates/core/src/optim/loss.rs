use serde::{Deserialize, Serialize};

use crate::autodiff::{Exec, Tensor};
use crate::error::{Error, Result};

pub const CHARBONNIER_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    L1,
    Charbonnier {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_epsilon() -> f64 {
    CHARBONNIER_EPSILON
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Charbonnier {
            epsilon: CHARBONNIER_EPSILON,
        }
    }
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::L1 => Ok(()),
            LossKind::Charbonnier { epsilon } if epsilon > 0.0 && epsilon.is_finite() => Ok(()),
            LossKind::Charbonnier { epsilon } => Err(Error::InvalidConfig(format!(
                "charbonnier epsilon must be positive, got {epsilon}"
            ))),
        }
    }
}

/// Mean elementwise loss between `pred` and `target`.
///
/// Charbonnier is `mean(sqrt(r² + ε²))`, so identical inputs give exactly ε.
pub fn loss<E: Exec>(exec: &mut E, pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss".into(),
            shapes: vec![pred.shape().to_vec(), target.shape().to_vec()],
        });
    }
    let r = exec.sub(pred, target)?;
    match kind {
        LossKind::L1 => {
            let a = exec.abs(&r)?;
            exec.mean(&a)
        }
        LossKind::Charbonnier { epsilon } => {
            let sq = exec.square(&r)?;
            let floor = Tensor::full(r.shape(), epsilon * epsilon);
            let shifted = exec.add(&sq, &floor)?;
            let root = exec.sqrt(&shifted)?;
            exec.mean(&root)
        }
    }
}
