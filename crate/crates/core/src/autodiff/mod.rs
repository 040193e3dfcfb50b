//! Dense tensors with reverse-mode differentiation and Hessian-vector
//! products.

mod gemm;
mod graph;
mod hvp;
mod ops;
mod params;
mod tensor;

pub use graph::{forward_op, Eager, Exec, Gradients, Graph};
pub use hvp::{brute_force_hessian, fd_radius, hvp, HvpMethod, BRUTE_FORCE_STEP};
pub use ops::Op;
pub use params::{ParamVector, Segment};
pub use tensor::{NodeId, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::seed;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    fn random(shape: &[usize], rng: &mut seed::Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relu_clips_negatives() {
        let y = forward_op(&Op::Relu, &[&t(&[3], &[-1.0, 0.0, 2.0])]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn adding_zeros_is_bitwise_identity() {
        let mut rng = seed::rng(1);
        let x = random(&[2, 3, 4], &mut rng);
        let y = forward_op(&Op::Add, &[&x, &Tensor::zeros_like(&x)]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    /// Direct nested-loop cross-correlation.
    fn conv_oracle(x: &Tensor, w: &Tensor) -> Vec<f64> {
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let (ho, wo) = (h - k + 1, wd - k + 1);
        let mut out = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    acc += x.data()[((bi * c + ci) * h + y + i) * wd + xx + j]
                                        * w.data()[((oi * c + ci) * k + i) * k + j];
                                }
                            }
                        }
                        out[((bi * o + oi) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_restores_interior() {
        let x = Tensor::new(vec![1, 1, 5, 5], (0..25).map(|v| v as f64 * 0.1).collect()).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = forward_op(&Op::Conv2d, &[&x, &w]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), conv_oracle(&x, &w).as_slice());
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(y.data()[r * 3 + c], x.data()[(r + 1) * 5 + c + 1]);
            }
        }
        // the padded variant keeps the full frame
        let padded = forward_op(&Op::PadReflect(1), &[&x]).unwrap();
        let y = forward_op(&Op::Conv2d, &[&padded, &w]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = seed::rng(2);
        let x = random(&[2, 3, 7, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let y = forward_op(&Op::Conv2d, &[&x, &w]).unwrap();
        for (a, b) in y.data().iter().zip(conv_oracle(&x, &w)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_offending_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        match forward_op(&Op::Add, &[&a, &b]) {
            Err(Error::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2, 3], vec![3, 2]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(forward_op(&Op::Conv2d, &[&x, &w]).is_err());
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]));
        let sq = g.square(&x).unwrap();
        let loss = g.sum(&sq).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn abs_at_zero_has_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[0.5, -2.0, 1.0]));
        let y = t(&[3], &[0.5, -2.0, 1.0]);
        let d = g.sub(&x, &y).unwrap();
        let a = g.abs(&d).unwrap();
        let loss = g.mean(&a).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected_and_graph_reusable() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[3.0, -1.0]));
        let sq = g.square(&x).unwrap();
        assert!(matches!(g.backward(&sq), Err(Error::NonScalarLoss(_))));
        let l1 = g.sum(&sq).unwrap();
        let l2 = g.mean(&x).unwrap();
        let g1 = g.backward(&l1).unwrap();
        let g2 = g.backward(&l2).unwrap();
        let g1_again = g.backward(&l1).unwrap();
        assert_eq!(g1.get(&x).unwrap().data(), &[6.0, -2.0]);
        assert_eq!(g2.get(&x).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(g1.get(&x).unwrap(), g1_again.get(&x).unwrap());
    }

    #[test]
    fn foreign_tensors_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.leaf(&Tensor::scalar(1.0));
        assert_eq!(g2.square(&x), Err(Error::ForeignNode));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]));
        let y = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let loss = g.sum(&x).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&y).unwrap().data(), &[0.0; 3]);
    }

    /// Two conv layers with reflect padding, relu, and a squared/abs head.
    fn two_layer_loss(exec: &mut impl Exec, x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, target: &Tensor) -> Tensor {
        let p = exec.pad_reflect(x, 1).unwrap();
        let h = exec.conv2d(&p, w1, Some(b1)).unwrap();
        let h = exec.relu(&h).unwrap();
        let h = exec.pad_reflect(&h, 1).unwrap();
        let y = exec.conv2d(&h, w2, None).unwrap();
        let d = exec.sub(&y, target).unwrap();
        let sq = exec.square(&d).unwrap();
        let s = exec.mul_scalar(&sq, 0.5).unwrap();
        let a = exec.abs(&d).unwrap();
        let tot = exec.add(&s, &a).unwrap();
        let c = exec.clamp(&tot, 0.0, 10.0).unwrap();
        let r = exec.sqrt(&c).unwrap();
        exec.mean(&r).unwrap()
    }

    #[test]
    fn two_layer_conv_gradient_matches_finite_differences() {
        let h = 1e-5;
        let mut rng = seed::rng(3);
        let x = random(&[1, 2, 8, 8], &mut rng);
        let target = random(&[1, 2, 8, 8], &mut rng);
        let params = vec![
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[2, 3, 3, 3], &mut rng),
        ];
        let mut g = Graph::new();
        let leaves: Vec<Tensor> = params.iter().map(|p| g.leaf(p)).collect();
        let loss = two_layer_loss(&mut g, &x, &leaves[0], &leaves[1], &leaves[2], &target);
        let grads = g.backward(&loss).unwrap();
        let base_sig = g.branch_signature();

        let eval = |ps: &[Tensor]| -> (f64, u64) {
            let mut g = Graph::new();
            let l: Vec<Tensor> = ps.iter().map(|p| g.leaf(p)).collect();
            let loss = two_layer_loss(&mut g, &x, &l[0], &l[1], &l[2], &target);
            (loss.item(), g.branch_signature())
        };
        let scale = leaves
            .iter()
            .map(|l| grads.get(l).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .fold(0.0, f64::max);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for (pi, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(leaf).unwrap();
            for k in 0..params[pi].len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= h;
                let (lp, sp) = eval(&plus);
                let (lm, sm) = eval(&minus);
                if sp != base_sig || sm != base_sig {
                    continue;
                }
                checked += 1;
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic.data()[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3 * scale);
                worst = worst.max(rel);
            }
        }
        assert!(checked > 70, "too few smooth stencils: {checked}");
        assert!(worst <= 1e-6, "max relative error {worst}");
    }
}
