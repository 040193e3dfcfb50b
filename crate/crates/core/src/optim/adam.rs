use crate::autodiff::ParamVector;
use crate::error::{check_finite, Result};

pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam with its moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1,
            beta2,
            eps: ADAM_EPS,
            lr,
        }
    }

    /// `β1 = 0.9, β2 = 0.999`.
    pub fn outer(len: usize, lr: f64) -> Self {
        Self::new(len, 0.9, 0.999, lr)
    }

    /// `β1 = 0, β2 = 0.999`, used for first-order virtual updates.
    pub fn virtual_update(len: usize, lr: f64) -> Self {
        Self::new(len, 0.0, 0.999, lr)
    }

    pub fn step(&mut self, theta: &ParamVector, grad: &ParamVector) -> Result<ParamVector> {
        self.step_with_lr(theta, grad, self.lr)
    }

    /// One update with an explicit learning rate; `self.lr` is left alone.
    pub fn step_with_lr(&mut self, theta: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
        theta.check_len(grad)?;
        check_finite("gradient", grad.data())?;
        if self.m.len() != theta.len() {
            return Err(crate::Error::LengthMismatch {
                expected: self.m.len(),
                got: theta.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut out = theta.data().to_vec();
        for (i, &g) in grad.data().iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            out[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        theta.with_data(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_flat(v.to_vec())
    }

    #[test]
    fn zero_gradient_leaves_theta() {
        let mut s = AdamState::outer(3, 0.1);
        let mut th = pv(&[1.0, -2.0, 0.5]);
        for _ in 0..10 {
            th = s.step(&th, &pv(&[0.0; 3])).unwrap();
        }
        assert_eq!(th.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(s.t, 10);
    }

    #[test]
    fn first_step_without_momentum_is_signed_lr() {
        for g in [3.0, -0.02, 250.0] {
            let mut s = AdamState::virtual_update(1, 0.01);
            let th = s.step(&pv(&[1.0]), &pv(&[g])).unwrap();
            let delta = th.data()[0] - 1.0;
            assert!((delta + 0.01 * g.signum()).abs() < 1e-8, "{g}: {delta}");
            assert_eq!(s.m[0], g);
        }
    }

    #[test]
    fn zero_beta1_keeps_current_gradient() {
        let mut s = AdamState::virtual_update(2, 0.01);
        let mut th = pv(&[0.0, 0.0]);
        for k in 0..5 {
            let g = pv(&[k as f64, -(k as f64) * 0.5]);
            th = s.step(&th, &g).unwrap();
            assert_eq!(s.m, g.data());
        }
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut s = AdamState::outer(1, 0.1);
        let mut th = pv(&[0.0]);
        for _ in 0..200 {
            let g = pv(&[th.data()[0] - 3.0]);
            th = s.step(&th, &g).unwrap();
        }
        assert!((th.data()[0] - 3.0).abs() < 0.05, "{}", th.data()[0]);
    }

    #[test]
    fn bad_gradients_rejected() {
        let mut s = AdamState::outer(3, 0.1);
        let th = pv(&[0.0; 3]);
        match s.step(&th, &pv(&[0.0, f64::NAN, 1.0])) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.t, 0);
        assert!(s.step(&th, &pv(&[0.0; 2])).is_err());
    }
}
