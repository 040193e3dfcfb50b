//! A small residual convolutional restoration network.
//!
//! Every layer is `reflect-pad -> conv -> relu`, except the last which has
//! no activation. With `residual` the body predicts a correction that is
//! added to the input, so a net with all-zero parameters is the identity.

mod checkpoint;

pub(crate) use checkpoint::read_text_line;
pub use checkpoint::{read_checkpoint, read_segments, write_checkpoint, write_segments, CHECKPOINT_HEADER};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Exec, ParamVector, Tensor};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub num_layers: usize,
    pub kernel_size: usize,
    pub residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            hidden_channels: 16,
            num_layers: 3,
            kernel_size: 3,
            residual: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.in_channels == 0 || self.hidden_channels == 0 || self.num_layers == 0 {
            return bad("channel and layer counts must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        if self.residual && self.num_layers < 2 {
            return bad("a residual net needs at least two layers");
        }
        Ok(())
    }

    /// `(in, out)` channel pairs per layer.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|l| {
                let cin = if l == 0 { self.in_channels } else { self.hidden_channels };
                let cout = if l + 1 == self.num_layers {
                    self.in_channels
                } else {
                    self.hidden_channels
                };
                (cin, cout)
            })
            .collect()
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        self.layer_channels()
            .into_iter()
            .enumerate()
            .flat_map(|(l, (cin, cout))| {
                [
                    (format!("conv{l}.weight"), vec![cout, cin, k, k]),
                    (format!("conv{l}.bias"), vec![cout]),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        self.layer_channels()
            .iter()
            .map(|&(cin, cout)| cout * cin * k2 + cout)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestorationNet {
    config: NetConfig,
    params: ParamVector,
}

impl RestorationNet {
    /// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamVector::zeros_with_layout(config.layout());
        let mut rng = seed::rng(seed);
        let k2 = config.kernel_size * config.kernel_size;
        let segments = params.segments().to_vec();
        for seg in segments.iter().filter(|s| s.name.ends_with(".weight")) {
            let fan_in = seg.shape[1] * k2;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut params.data_mut()[seg.range()] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(RestorationNet { config, params })
    }

    pub fn from_params(config: NetConfig, params: ParamVector) -> Result<Self> {
        config.validate()?;
        let template = ParamVector::zeros_with_layout(config.layout());
        if !template.same_layout(&params) {
            return Err(Error::InvalidConfig(
                "parameter layout does not match the network configuration".into(),
            ));
        }
        Ok(RestorationNet { config, params })
    }

    /// Independent copy evaluating with `theta`; `self` is untouched.
    pub fn with_params(&self, theta: &ParamVector) -> Result<Self> {
        if theta.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                got: theta.len(),
            });
        }
        Ok(RestorationNet {
            config: self.config.clone(),
            params: self.params.with_data(theta.data().to_vec())?,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let k = self.config.kernel_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] < k || s[3] < k {
            return Err(Error::ShapeMismatch {
                op: "restoration_net".into(),
                shapes: vec![s.to_vec()],
            });
        }
        Ok(())
    }

    /// Inference without recording.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let weights: Vec<Tensor> = self.params.unflatten().into_iter().map(|(_, t)| t).collect();
        self.forward_with(&mut Eager, &weights, x)
    }

    /// Forward pass through `exec` using `weights` (in layout order), which
    /// may be graph leaves.
    pub fn forward_with<E: Exec>(&self, exec: &mut E, weights: &[Tensor], x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let pad = self.config.kernel_size / 2;
        let layers = self.config.num_layers;
        let mut h = x.clone();
        for l in 0..layers {
            let padded = if pad > 0 { exec.pad_reflect(&h, pad)? } else { h };
            h = exec.conv2d(&padded, &weights[2 * l], Some(&weights[2 * l + 1]))?;
            if l + 1 < layers {
                h = exec.relu(&h)?;
            }
        }
        if self.config.residual {
            h = exec.add(x, &h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::Rng;

    fn image(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = seed::rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn default_param_count() {
        let c = NetConfig::default();
        assert_eq!(c.param_count(), 3 * 16 * 9 + 16 + 16 * 16 * 9 + 16 + 16 * 3 * 9 + 3);
        assert_eq!(c.param_count(), 3203);
        let net = RestorationNet::init(c, 0).unwrap();
        assert_eq!(net.params().len(), 3203);
    }

    #[test]
    fn param_count_formula_matches_layout_for_random_configs() {
        let mut rng = seed::rng(11);
        for _ in 0..5 {
            let c = NetConfig {
                in_channels: rng.random_range(1..5),
                hidden_channels: rng.random_range(1..20),
                num_layers: rng.random_range(2..6),
                kernel_size: 2 * rng.random_range(0..3) + 1,
                residual: rng.random(),
            };
            let enumerated: usize = c.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            assert_eq!(c.param_count(), enumerated, "{c:?}");
        }
    }

    #[test]
    fn init_is_deterministic_and_he_scaled() {
        let a = RestorationNet::init(NetConfig::default(), 42).unwrap();
        let b = RestorationNet::init(NetConfig::default(), 42).unwrap();
        assert_eq!(a, b);
        let c = RestorationNet::init(NetConfig::default(), 43).unwrap();
        assert_ne!(a, c);
        let w = a.params().segment("conv1.weight").unwrap();
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        let want = (2.0f64 / 144.0).sqrt();
        assert!((std / want - 1.0).abs() < 0.1, "{std} vs {want}");
        assert!(a.params().segment("conv1.bias").unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let even = NetConfig {
            kernel_size: 4,
            ..NetConfig::default()
        };
        assert!(RestorationNet::init(even, 0).is_err());
        let shallow = NetConfig {
            num_layers: 1,
            ..NetConfig::default()
        };
        assert!(RestorationNet::init(shallow, 0).is_err());
    }

    #[test]
    fn zero_residual_net_is_identity() {
        let net = RestorationNet::init(NetConfig::default(), 1).unwrap();
        let zero = net.with_params(&net.params().zeros_like()).unwrap();
        let x = image(5, &[2, 3, 9, 11]);
        assert_eq!(zero.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_preserves_shape_and_is_deterministic() {
        let net = RestorationNet::init(NetConfig::default(), 1).unwrap();
        for shape in [[1, 3, 3, 3], [2, 3, 8, 5], [1, 3, 16, 16]] {
            let x = image(6, &shape);
            let y1 = net.forward(&x).unwrap();
            let y2 = net.forward(&x).unwrap();
            assert_eq!(y1.shape(), &shape);
            assert_eq!(y1, y2);
        }
        assert!(net.forward(&image(6, &[1, 2, 8, 8])).is_err());
        assert!(net.forward(&image(6, &[1, 3, 2, 8])).is_err());
    }

    #[test]
    fn with_params_is_isolated() {
        let net = RestorationNet::init(NetConfig::default(), 2).unwrap();
        let x = image(7, &[1, 3, 8, 8]);
        let same = net.with_params(net.params()).unwrap();
        assert_eq!(same.forward(&x).unwrap(), net.forward(&x).unwrap());

        let original = net.params().clone();
        let mut theta = net.params().clone();
        theta.data_mut()[0] += 1.0;
        let moved = net.with_params(&theta).unwrap();
        assert_eq!(net.params(), &original);
        assert_ne!(moved.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(net.with_params(&ParamVector::from_flat(vec![0.0; 3])).is_err());
    }

    #[test]
    fn graph_and_eager_paths_agree() {
        let net = RestorationNet::init(NetConfig::default(), 3).unwrap();
        let x = image(8, &[1, 3, 8, 8]);
        let mut g = Graph::new();
        let leaves: Vec<Tensor> = net.params().unflatten().iter().map(|(_, t)| g.leaf(t)).collect();
        let y = net.forward_with(&mut g, &leaves, &x).unwrap();
        assert!(y.node().is_some());
        assert_eq!(y.data(), net.forward(&x).unwrap().data());
    }

    #[test]
    fn output_change_is_linear_in_small_parameter_perturbations() {
        let net = RestorationNet::init(NetConfig::default(), 4).unwrap();
        let x = image(9, &[1, 3, 8, 8]);
        let y0 = net.forward(&x).unwrap();
        let mut rng = seed::rng(10);
        let dir: Vec<f64> = (0..net.params().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dir = ParamVector::from_flat(dir);
        let mut ratios = Vec::new();
        for delta in [1e-3, 1e-4, 1e-5, 1e-6] {
            let theta = net.params().add_scaled(&dir, delta).unwrap();
            let y = net.with_params(&theta).unwrap().forward(&x).unwrap();
            let change = y.data().iter().zip(y0.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            ratios.push(change / delta);
        }
        let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
        assert!(hi / lo < 1.5, "{ratios:?}");
    }
}
