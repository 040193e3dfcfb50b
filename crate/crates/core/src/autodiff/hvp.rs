//! Hessian-vector products from finite differences of exact gradients.

use super::params::ParamVector;
use crate::error::{check_finite, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HvpMethod {
    /// Central difference of the gradient along `v` with the default radius
    /// [`fd_radius`].
    FiniteDiff,
    /// Central difference with a caller-chosen radius.
    FiniteDiffRadius(f64),
    /// Full Hessian assembled column by column, then multiplied by `v`.
    /// Costs `2P` gradient evaluations; meant as a test oracle.
    BruteForce,
}

/// Step used per coordinate when assembling the brute-force Hessian.
pub const BRUTE_FORCE_STEP: f64 = 1e-5;

/// Perturbation radius for a direction `v`: the step `r·v` has norm ~1e-4.
pub fn fd_radius(v: &ParamVector) -> f64 {
    1e-4 / (v.norm() + 1e-12)
}

/// `H·v` for the Hessian of the function whose gradient is `grad`.
pub fn hvp<F>(mut grad: F, theta: &ParamVector, v: &ParamVector, method: HvpMethod) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    theta.check_len(v)?;
    let out = match method {
        HvpMethod::FiniteDiff | HvpMethod::FiniteDiffRadius(_) => {
            let r = match method {
                HvpMethod::FiniteDiffRadius(r) => r,
                _ => fd_radius(v),
            };
            let plus = grad(&theta.add_scaled(v, r)?)?;
            let minus = grad(&theta.add_scaled(v, -r)?)?;
            let data = plus
                .data()
                .iter()
                .zip(minus.data())
                .map(|(p, m)| (p - m) / (2.0 * r))
                .collect();
            theta.with_data(data)?
        }
        HvpMethod::BruteForce => {
            let h = brute_force_hessian(grad, theta, BRUTE_FORCE_STEP)?;
            let n = theta.len();
            let data = (0..n)
                .map(|i| (0..n).map(|j| h[i * n + j] * v.data()[j]).sum())
                .collect();
            theta.with_data(data)?
        }
    };
    check_finite("hessian-vector product", out.data())?;
    Ok(out)
}

/// Dense row-major Hessian, symmetrized as `(H + Hᵀ) / 2`.
pub fn brute_force_hessian<F>(mut grad: F, theta: &ParamVector, step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    let n = theta.len();
    let mut h = vec![0.0; n * n];
    let mut probe = theta.clone();
    for j in 0..n {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + step;
        let plus = grad(&probe)?;
        probe.data_mut()[j] = orig - step;
        let minus = grad(&probe)?;
        probe.data_mut()[j] = orig;
        for i in 0..n {
            h[i * n + j] = (plus.data()[i] - minus.data()[i]) / (2.0 * step);
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (h[i * n + j] + h[j * n + i]);
            h[i * n + j] = s;
            h[j * n + i] = s;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn quad_grad(a: [[f64; 3]; 3]) -> impl FnMut(&ParamVector) -> Result<ParamVector> {
        move |t: &ParamVector| {
            let x = t.data();
            let g = (0..3).map(|i| (0..3).map(|j| a[i][j] * x[j]).sum()).collect();
            Ok(ParamVector::from_flat(g))
        }
    }

    #[test]
    fn identity_hessian_returns_direction() {
        let theta = ParamVector::from_flat(vec![0.3, -1.2, 4.0, 0.0]);
        let v = ParamVector::from_flat(vec![1.0, 2.0, -0.5, 7.0]);
        let hv = hvp(|t: &ParamVector| Ok(t.clone()), &theta, &v, HvpMethod::FiniteDiff).unwrap();
        for (a, b) in hv.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn quadratic_form_first_column() {
        let a = [[2.0, -1.0, 0.5], [-1.0, 3.0, 0.25], [0.5, 0.25, 1.5]];
        let theta = ParamVector::from_flat(vec![0.7, -0.1, 2.0]);
        let e1 = ParamVector::from_flat(vec![1.0, 0.0, 0.0]);
        for method in [HvpMethod::FiniteDiff, HvpMethod::BruteForce] {
            let hv = hvp(quad_grad(a), &theta, &e1, method).unwrap();
            for i in 0..3 {
                assert!((hv.data()[i] - a[i][0]).abs() < 1e-8, "{method:?}");
            }
        }
    }

    #[test]
    fn rejects_length_mismatch_and_non_finite() {
        let theta = ParamVector::from_flat(vec![1.0, 2.0]);
        let v = ParamVector::from_flat(vec![1.0]);
        assert!(matches!(
            hvp(|t: &ParamVector| Ok(t.clone()), &theta, &v, HvpMethod::FiniteDiff),
            Err(Error::LengthMismatch { .. })
        ));
        let v = ParamVector::from_flat(vec![1.0, 1.0]);
        let err = hvp(
            |t: &ParamVector| Ok(t.with_data(vec![0.0, if t.data()[1] > 2.0 { f64::INFINITY } else { 0.0 }]).unwrap()),
            &theta,
            &v,
            HvpMethod::FiniteDiff,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }
}
