use dil_core::autodiff::{HvpMethod, ParamVector};
use dil_core::degradation::{sample_batch, synth_corpus, CleanImage, ConfounderSet, PatchPair, SamplingMode};
use dil_core::model::{NetConfig, RestorationNet};
use dil_core::optim::meta::{self, mean_loss_grad, VirtualMode};
use dil_core::optim::*;
use dil_core::seed;
use proptest::prelude::*;
use rand::Rng;

fn corpus() -> Vec<CleanImage> {
    synth_corpus(77, 6, 64, 64).unwrap()
}

fn identity_set() -> ConfounderSet {
    ConfounderSet::awgn(&[0.0]).unwrap()
}

fn noise_set() -> ConfounderSet {
    ConfounderSet::awgn(&[5.0, 10.0, 15.0, 20.0]).unwrap()
}

fn net(seed: u64) -> RestorationNet {
    RestorationNet::init(NetConfig::default(), seed).unwrap()
}

fn cfg(variant: Variant, iters: usize) -> TrainConfig {
    TrainConfig {
        variant,
        iters,
        seed: 11,
        patch: 16,
        ..TrainConfig::default()
    }
}

/// Linear least squares, `L = ‖Aθ − b‖² / (2m)`.
struct Lsq;

struct LsqBatch {
    a: Vec<f64>,
    b: Vec<f64>,
    m: usize,
}

const DIM: usize = 5;

impl LsqBatch {
    fn random(rng: &mut seed::Rng, m: usize) -> Self {
        LsqBatch {
            a: (0..m * DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            m,
        }
    }

    fn residual(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| (0..DIM).map(|j| self.a[i * DIM + j] * theta[j]).sum::<f64>() - self.b[i])
            .collect()
    }

    /// `H = AᵀA/m` and `c = Aᵀb/m`, so that `∇L = Hθ − c`.
    fn hessian_and_offset(&self) -> (Vec<f64>, Vec<f64>) {
        let mut h = vec![0.0; DIM * DIM];
        let mut c = vec![0.0; DIM];
        for i in 0..self.m {
            for r in 0..DIM {
                c[r] += self.a[i * DIM + r] * self.b[i] / self.m as f64;
                for s in 0..DIM {
                    h[r * DIM + s] += self.a[i * DIM + r] * self.a[i * DIM + s] / self.m as f64;
                }
            }
        }
        (h, c)
    }
}

impl Objective for Lsq {
    type Batch = LsqBatch;
    fn num_params(&self) -> usize {
        DIM
    }
    fn loss(&self, theta: &ParamVector, batch: &LsqBatch) -> dil_core::Result<f64> {
        let r = batch.residual(theta.data());
        Ok(r.iter().map(|v| v * v).sum::<f64>() / (2.0 * batch.m as f64))
    }
    fn loss_grad(&self, theta: &ParamVector, batch: &LsqBatch) -> dil_core::Result<(f64, ParamVector)> {
        let r = batch.residual(theta.data());
        let g: Vec<f64> = (0..DIM)
            .map(|j| (0..batch.m).map(|i| batch.a[i * DIM + j] * r[i]).sum::<f64>() / batch.m as f64)
            .collect();
        Ok((self.loss(theta, batch)?, theta.with_data(g)?))
    }
}

fn matvec(h: &[f64], v: &[f64]) -> Vec<f64> {
    (0..DIM).map(|r| (0..DIM).map(|s| h[r * DIM + s] * v[s]).sum()).collect()
}

/// Closed-form gradient of `L_out(θ − α(H̄θ − c̄))` in θ.
fn composed_gradient(inner: &[&LsqBatch], outer: &LsqBatch, theta: &[f64], alpha: f64) -> Vec<f64> {
    let n = inner.len() as f64;
    let mut hbar = vec![0.0; DIM * DIM];
    let mut cbar = vec![0.0; DIM];
    for b in inner {
        let (h, c) = b.hessian_and_offset();
        hbar.iter_mut().zip(&h).for_each(|(a, v)| *a += v / n);
        cbar.iter_mut().zip(&c).for_each(|(a, v)| *a += v / n);
    }
    let hth = matvec(&hbar, theta);
    let phi: Vec<f64> = (0..DIM).map(|j| theta[j] - alpha * (hth[j] - cbar[j])).collect();
    let (ho, co) = outer.hessian_and_offset();
    let hp = matvec(&ho, &phi);
    let u: Vec<f64> = (0..DIM).map(|j| hp[j] - co[j]).collect();
    let hu = matvec(&hbar, &u);
    (0..DIM).map(|j| u[j] - alpha * hu[j]).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    num / den
}

#[test]
fn quadratic_parallel_gradient_matches_closed_form() {
    let mut rng = seed::rng(3);
    for _ in 0..10 {
        let groups: Vec<LsqBatch> = (0..4).map(|_| LsqBatch::random(&mut rng, 6)).collect();
        let outer = LsqBatch::random(&mut rng, 8);
        let theta: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let refs: Vec<&LsqBatch> = groups.iter().collect();
        let alpha = 0.1;
        let got = meta::parallel_meta_gradient(
            &Lsq,
            &ParamVector::from_flat(theta.clone()),
            &refs,
            &outer,
            alpha,
            HvpMethod::FiniteDiff,
        )
        .unwrap();
        let want = composed_gradient(&refs, &outer, &theta, alpha);
        assert!(rel_err(got.grad.data(), &want) < 1e-6);
    }
}

#[test]
fn quadratic_serial_gradient_is_mean_of_compositions() {
    let mut rng = seed::rng(4);
    for _ in 0..10 {
        let groups: Vec<LsqBatch> = (0..3).map(|_| LsqBatch::random(&mut rng, 6)).collect();
        let outer = LsqBatch::random(&mut rng, 8);
        let theta: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let refs: Vec<&LsqBatch> = groups.iter().collect();
        let got = meta::serial_meta_gradient(
            &Lsq,
            &ParamVector::from_flat(theta.clone()),
            &refs,
            &outer,
            0.2,
            HvpMethod::FiniteDiff,
        )
        .unwrap();
        let mut want = vec![0.0; DIM];
        for g in &groups {
            let c = composed_gradient(&[g], &outer, &theta, 0.2);
            want.iter_mut().zip(c).for_each(|(w, v)| *w += v / 3.0);
        }
        assert!(rel_err(got.grad.data(), &want) < 1e-6);
    }
}

#[test]
fn virtual_update_descends_for_small_alpha() {
    let images = corpus();
    let set = noise_set();
    for s in 0..20 {
        let n = net(s);
        let obj = NetObjective::new(&n, LossKind::default());
        let batch = sample_batch(&images, &set, SamplingMode::Outer, 4, 12, s).unwrap();
        let step = meta::virtual_update(&obj, n.params(), &[&batch], 1e-4, VirtualMode::Sgd).unwrap();
        let after = obj.loss(&step.phi, &batch).unwrap();
        assert!(after <= step.loss.mean, "instance {s}: {after} > {}", step.loss.mean);
    }
}

#[test]
fn virtual_update_leaves_theta_untouched() {
    let images = corpus();
    let n = net(1);
    let before = n.params().clone();
    let obj = NetObjective::new(&n, LossKind::L1);
    let batch = sample_batch(&images, &noise_set(), SamplingMode::Outer, 2, 12, 0).unwrap();
    let step = meta::virtual_update(&obj, n.params(), &[&batch], 0.5, VirtualMode::Sgd).unwrap();
    assert_eq!(n.params(), &before);
    assert_ne!(step.phi, before);
}

#[test]
fn first_order_direction_is_negative_mean_gradient() {
    let images = corpus();
    let set = noise_set();
    let n = net(2);
    let obj = NetObjective::new(&n, LossKind::default());
    let batch = sample_batch(&images, &set, SamplingMode::Parallel, 8, 12, 9).unwrap();
    let groups: Vec<&[PatchPair]> = batch.chunks(2).collect();
    let alpha = 1e-3;
    let step = meta::virtual_update(&obj, n.params(), &groups, alpha, VirtualMode::Sgd).unwrap();
    let g = mean_loss_grad(&obj, n.params(), &groups).unwrap().grad;
    for i in 0..g.len() {
        let dir = (step.phi.data()[i] - n.params().data()[i]) / alpha;
        let ulp = 4.0 * f64::EPSILON * n.params().data()[i].abs() / alpha;
        assert!((dir + g.data()[i]).abs() <= ulp, "{i}: {dir} vs {}", g.data()[i]);
    }
}

#[test]
fn erm_runs_are_deterministic() {
    let images = corpus();
    let c = cfg(Variant::Erm, 15);
    let a = train(net(0), &images, &noise_set(), &c).unwrap();
    let b = train(net(0), &images, &noise_set(), &c).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.net.params(), b.net.params());
    assert!(a.abort.is_none());
}

#[test]
fn erm_loss_stays_finite_over_long_run() {
    let images = synth_corpus(5, 10, 96, 96).unwrap();
    let c = TrainConfig {
        iters: 1000,
        ..TrainConfig::default()
    };
    let run = train(net(4), &images, &noise_set(), &c).unwrap();
    assert!(run.abort.is_none());
    assert_eq!(run.reports.len(), 1000);
    assert!(run.reports.iter().all(|r| r.outer_loss.is_finite() && r.grad_norm.is_finite()));
}

#[test]
fn erm_learns_the_identity_task() {
    let images = corpus();
    let c = TrainConfig {
        loss: LossKind::L1,
        ..cfg(Variant::Erm, 500)
    };
    let run = train(net(6), &images, &identity_set(), &c).unwrap();
    let last = run.reports.last().unwrap().outer_loss;
    assert!(last < 1e-4, "final loss {last}");
}

#[test]
fn zero_iterations_return_initial_params() {
    let n = net(9);
    let run = train(n.clone(), &corpus(), &noise_set(), &cfg(Variant::DilSs, 0)).unwrap();
    assert_eq!(run.net.params(), n.params());
    assert!(run.reports.is_empty());
}

#[test]
fn learning_rate_trace_halves_twice() {
    let c = TrainConfig {
        iters: 8,
        beta: 0.4,
        ..TrainConfig::default()
    };
    assert_eq!(lr_trace(&c), vec![0.4, 0.4, 0.4, 0.4, 0.2, 0.2, 0.1, 0.1]);
    let c = TrainConfig { iters: 100, ..c };
    let t = lr_trace(&c);
    assert_eq!(t.iter().filter(|&&v| v == 0.4).count(), 50);
    assert_eq!(t.iter().filter(|&&v| v == 0.2).count(), 25);
    assert_eq!(t.iter().filter(|&&v| v == 0.1).count(), 25);
}

#[test]
fn reported_lr_follows_schedule() {
    let run = train(net(0), &corpus(), &noise_set(), &cfg(Variant::Erm, 8)).unwrap();
    let lrs: Vec<f64> = run.reports.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, lr_trace(&cfg(Variant::Erm, 8)));
}

proptest! {
    #[test]
    fn schedule_is_non_increasing(iters in 0usize..5000) {
        let c = TrainConfig { iters, ..TrainConfig::default() };
        let t = lr_trace(&c);
        prop_assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }
}

fn trajectory(variant: Variant, alpha: f64, steps: usize) -> Vec<ParamVector> {
    let c = TrainConfig {
        alpha,
        ..cfg(variant, steps)
    };
    let state = OptimState::new(&c, net(0).params().len());
    let mut out = Vec::new();
    train_from(net(0), &corpus(), &noise_set(), &c, state, |_, n, _| {
        out.push(n.params().clone());
        Ok(())
    })
    .unwrap();
    out
}

#[test]
fn parallel_second_order_with_zero_alpha_is_erm() {
    let erm = trajectory(Variant::Erm, 0.0, 20);
    let ps = trajectory(Variant::DilPs, 0.0, 20);
    assert_eq!(erm.len(), 20);
    assert_eq!(erm, ps);
}

#[test]
fn single_confounder_serial_matches_parallel() {
    let images = corpus();
    let set = ConfounderSet::awgn(&[15.0]).unwrap();
    let mut a = net(3);
    let mut b = net(3);
    let ca = cfg(Variant::DilPs, 10);
    let cb = cfg(Variant::DilSs, 10);
    let mut sa = OptimState::new(&ca, a.params().len());
    let mut sb = OptimState::new(&cb, b.params().len());
    for _ in 0..3 {
        let ra = dil_ps_step(&mut a, &images, &set, &ca, &mut sa).unwrap();
        let rb = dil_ss_step(&mut b, &images, &set, &cb, &mut sb).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(a.params(), b.params());
}

#[test]
fn serial_second_order_logs_every_inner_loss() {
    let mut n = net(5);
    let c = cfg(Variant::DilSs, 4);
    let mut st = OptimState::new(&c, n.params().len());
    let r = dil_ss_step(&mut n, &corpus(), &noise_set(), &c, &mut st).unwrap();
    assert_eq!(r.per_confounder_inner_loss.len(), 4);
    assert!(r.per_confounder_inner_loss.iter().all(|l| l.is_finite() && *l > 0.0));
}

#[test]
fn step_rejects_other_variant() {
    let mut n = net(0);
    let c = cfg(Variant::Erm, 4);
    let mut st = OptimState::new(&c, n.params().len());
    assert!(dil_sf_step(&mut n, &corpus(), &noise_set(), &c, &mut st).is_err());
    assert_eq!(st.iteration, 0);
}

#[test]
fn reptile_with_unit_beta_is_sgd_on_the_averaged_loss() {
    let images = corpus();
    let set = noise_set();
    let c = TrainConfig {
        beta: 1.0,
        inner_steps_pf: 1,
        virtual_optimizer: VirtualOptimizer::Sgd,
        first_order_outer: FirstOrderOuter::Interpolate,
        alpha: 0.01,
        ..cfg(Variant::DilPf, 100)
    };
    let mut n = net(1);
    let mut theta = n.params().clone();
    let mut st = OptimState::new(&c, theta.len());
    let obj = NetObjective::new(&n, c.loss);
    for it in 0..5 {
        dil_pf_step(&mut n, &images, &set, &c, &mut st).unwrap();
        let batch = sample_batch(&images, &set, SamplingMode::Parallel, c.batch, c.patch, inner_batch_seed(&c, it, 0)).unwrap();
        let groups: Vec<&[PatchPair]> = batch.chunks(2).collect();
        let g = mean_loss_grad(&obj, &theta, &groups).unwrap().grad;
        theta = theta.add_scaled(&g, -c.alpha).unwrap();
        assert_eq!(n.params(), &theta, "iteration {it}");
    }
}

#[test]
fn reptile_direction_is_nonzero() {
    let mut n = net(2);
    let before = n.params().clone();
    let c = cfg(Variant::DilPf, 10);
    let mut st = OptimState::new(&c, before.len());
    let r = dil_pf_step(&mut n, &corpus(), &noise_set(), &c, &mut st).unwrap();
    assert!(r.grad_norm > 0.0);
    assert_ne!(n.params(), &before);
    assert_eq!(st.virtual_adam.t, 2);
}

#[test]
fn serial_first_order_single_confounder_matches_parallel() {
    let images = corpus();
    let set = ConfounderSet::awgn(&[10.0]).unwrap();
    let base = TrainConfig {
        inner_steps_pf: 1,
        ..cfg(Variant::DilPf, 10)
    };
    let sf = TrainConfig {
        variant: Variant::DilSf,
        ..base.clone()
    };
    let mut a = net(4);
    let mut b = net(4);
    let mut sa = OptimState::new(&base, a.params().len());
    let mut sb = OptimState::new(&sf, b.params().len());
    for _ in 0..3 {
        let ra = dil_pf_step(&mut a, &images, &set, &base, &mut sa).unwrap();
        let rb = dil_sf_step(&mut b, &images, &set, &sf, &mut sb).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(a.params(), b.params());
    assert_eq!(sa, sb);
}

#[test]
fn serial_first_order_visits_confounders_in_order() {
    let images = corpus();
    let set = noise_set();
    let c = TrainConfig {
        virtual_optimizer: VirtualOptimizer::Sgd,
        alpha: 0.01,
        ..cfg(Variant::DilSf, 10)
    };
    let mut n = net(8);
    let start = n.params().clone();
    let mut st = OptimState::new(&c, start.len());
    let r = dil_sf_step(&mut n, &images, &set, &c, &mut st).unwrap();
    let obj = NetObjective::new(&n, c.loss);
    let mut tilde = start;
    for i in 0..4 {
        let batch = sample_batch(&images, &set, SamplingMode::Serial(i), c.batch, c.patch, inner_batch_seed(&c, 0, i)).unwrap();
        let (l, g) = obj.loss_grad(&tilde, &batch).unwrap();
        assert_eq!(r.per_confounder_inner_loss[i], l, "confounder {i}");
        tilde = tilde.add_scaled(&g, -c.alpha).unwrap();
    }
}

#[test]
fn config_validation() {
    let set = noise_set();
    assert!(TrainConfig { beta: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { alpha: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { n: Some(3), ..TrainConfig::default() }.validate_for(&set).is_err());
    assert!(TrainConfig { n: Some(4), ..TrainConfig::default() }.validate_for(&set).is_ok());
    let small = TrainConfig {
        variant: Variant::DilPs,
        batch: 3,
        ..TrainConfig::default()
    };
    assert!(small.validate_for(&set).is_err());
    let json = serde_json::to_value(TrainConfig::default()).unwrap();
    assert_eq!(json["variant"], "erm");
    assert_eq!(json["loss"]["kind"], "charbonnier");
    let back: TrainConfig = serde_json::from_value(json).unwrap();
    assert_eq!(back, TrainConfig::default());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"variant":"dil_xx"}"#).is_err());
}

#[test]
fn non_finite_step_aborts_with_partial_report() {
    let images = corpus();
    let c = TrainConfig {
        beta: 1e300,
        first_order_outer: FirstOrderOuter::Interpolate,
        virtual_optimizer: VirtualOptimizer::Sgd,
        alpha: 1e300,
        ..cfg(Variant::DilSf, 10)
    };
    let run = train(net(0), &images, &noise_set(), &c).unwrap();
    assert!(run.abort.is_some());
    assert!(run.reports.len() < 10);
    assert_eq!(run.state.iteration, run.reports.len());
}

#[test]
fn stopping_early_and_resuming_matches_one_run() {
    let images = corpus();
    let c = cfg(Variant::DilPf, 12);
    let whole = train(net(2), &images, &noise_set(), &c).unwrap();
    let state = OptimState::new(&c, net(2).params().len());
    let first = train_until(net(2), &images, &noise_set(), &c, state, 5, |_, _, _| Ok(())).unwrap();
    assert_eq!(first.state.iteration, 5);
    let rest = train_from(first.net, &images, &noise_set(), &c, first.state, |_, _, _| Ok(())).unwrap();
    assert_eq!(rest.net.params(), whole.net.params());
    assert_eq!([first.reports, rest.reports].concat(), whole.reports);
}
