//! Self-contained invariant checks behind `dil verify`.

use std::fmt;

use dil_core::autodiff::{hvp, Graph, HvpMethod, ParamVector, Tensor};
use dil_core::degradation::{
    add_gaussian_noise, gaussian_kernel, quant_table, sample_batch, synth_corpus, ConfounderSet, PatchPair,
    SamplingMode, STANDARD_LUMINANCE_TABLE,
};
use dil_core::metrics::{psnr, rgb_to_y, ssim, Channel};
use dil_core::model::{NetConfig, RestorationNet};
use dil_core::optim::meta::{parallel_meta_gradient, serial_meta_gradient};
use dil_core::optim::{loss, train, train_from, AdamState, LossKind, NetObjective, Objective, OptimState, TrainConfig, Variant};
use dil_core::seed;
use rand::Rng;
use serde::Serialize;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyResult {
    pub check_name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl fmt::Display for VerifyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<26} measured={:<12.6e} threshold={:<12.6e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.check_name,
            self.measured,
            self.threshold,
            self.detail
        )
    }
}

fn result(name: &str, passed: bool, measured: f64, threshold: f64, detail: String) -> VerifyResult {
    VerifyResult {
        check_name: name.to_string(),
        passed: passed && measured.is_finite(),
        measured,
        threshold,
        detail,
    }
}

fn failed(name: &str, e: impl fmt::Display) -> VerifyResult {
    VerifyResult {
        check_name: name.to_string(),
        passed: false,
        measured: f64::MAX,
        threshold: 0.0,
        detail: format!("error: {e}"),
    }
}

type Check = (&'static str, fn() -> Result<VerifyResult, dil_core::Error>);

const CHECKS: &[Check] = &[
    ("gradient_check", gradient_check),
    ("hvp_oracle", hvp_oracle),
    ("taylor_slope", taylor_slope),
    ("erm_reduction", erm_reduction),
    ("sign_convention_dil_sf", || sign_convention(Variant::DilSf)),
    ("sign_convention_dil_pf", || sign_convention(Variant::DilPf)),
    ("adam_scalar", adam_scalar),
    ("awgn_std", awgn_std),
    ("jpeg_q50_table", jpeg_table),
    ("blur_kernel_mass", blur_kernel_mass),
    ("psnr_offset", psnr_offset),
    ("ssim_identity", ssim_identity),
    ("luma_green", luma_green),
];

/// Runs every check; failures are results, never errors.
pub fn run_all(mut on_result: impl FnMut(&VerifyResult)) -> Vec<VerifyResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let r = f().unwrap_or_else(|e| failed(name, e));
            on_result(&r);
            r
        })
        .collect()
}

pub fn summarize(results: &[VerifyResult]) -> Result<(), CliError> {
    let bad: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.check_name.as_str()).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(bad.join(", ")))
    }
}

fn random_tensor(shape: &[usize], rng: &mut seed::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).expect("shape")
}

/// Loss, gradient and branch signature of `net` at `theta` on one pair.
fn recorded(net: &RestorationNet, theta: &ParamVector, x: &Tensor, y: &Tensor, kind: LossKind) -> Result<(f64, ParamVector, u64), dil_core::Error> {
    let mut g = Graph::new();
    let leaves: Vec<Tensor> = theta.unflatten().iter().map(|(_, t)| g.leaf(t)).collect();
    let pred = net.forward_with(&mut g, &leaves, x)?;
    let l = loss(&mut g, &pred, y, kind)?;
    let grads = g.backward(&l)?;
    let mut flat = Vec::with_capacity(theta.len());
    for leaf in &leaves {
        flat.extend_from_slice(grads.get(leaf).expect("leaf").data());
    }
    Ok((l.item(), theta.with_data(flat)?, g.branch_signature()))
}

/// Central differences at h=1e-5 cannot resolve Charbonnier curvature when
/// a residual sits within a few epsilon of zero (the truncation term grows
/// like h²/ε²), so such instances are redrawn, the smooth analogue of
/// skipping stencils that straddle a kink.
pub const CHARBONNIER_BAND: f64 = 5.0;

fn in_charbonnier_band(net: &RestorationNet, x: &Tensor, y: &Tensor, kind: LossKind) -> Result<bool, dil_core::Error> {
    let LossKind::Charbonnier { epsilon } = kind else { return Ok(false) };
    let pred = net.forward(x)?;
    Ok(pred.data().iter().zip(y.data()).any(|(p, t)| (p - t).abs() < CHARBONNIER_BAND * epsilon))
}

fn gradient_check() -> Result<VerifyResult, dil_core::Error> {
    let h = 1e-5;
    let instances = 20;
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut redrawn = 0;
    for kind in [LossKind::default(), LossKind::L1] {
        let mut accepted = 0;
        let mut draw = 0u64;
        while accepted < instances {
            let net = RestorationNet::init(NetConfig::default(), seed::derive(101, draw))?;
            let mut rng = seed::rng(seed::derive(202, draw));
            draw += 1;
            let x = random_tensor(&[1, 3, 8, 8], &mut rng);
            let y = random_tensor(&[1, 3, 8, 8], &mut rng);
            if in_charbonnier_band(&net, &x, &y, kind)? {
                redrawn += 1;
                continue;
            }
            accepted += 1;
            let theta = net.params().clone();
            let (_, grad, sig) = recorded(&net, &theta, &x, &y, kind)?;
            let floor = 1e-3 * grad.max_abs();
            let forward = |t: &ParamVector| -> Result<(f64, u64), dil_core::Error> {
                let mut g = Graph::new();
                let leaves: Vec<Tensor> = t.unflatten().iter().map(|(_, t)| g.leaf(t)).collect();
                let pred = net.forward_with(&mut g, &leaves, &x)?;
                let l = loss(&mut g, &pred, &y, kind)?;
                Ok((l.item(), g.branch_signature()))
            };
            for k in 0..theta.len() {
                let mut p = theta.clone();
                p.data_mut()[k] += h;
                let mut m = theta.clone();
                m.data_mut()[k] -= h;
                let (lp, sp) = forward(&p)?;
                let (lm, sm) = forward(&m)?;
                if sp != sig || sm != sig {
                    skipped += 1;
                    continue;
                }
                let fd = (lp - lm) / (2.0 * h);
                let a = grad.data()[k];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
            }
        }
    }
    Ok(result(
        "gradient_check",
        worst <= 1e-6,
        worst,
        1e-6,
        format!("{instances} instances per loss, {redrawn} redrawn near the Charbonnier knee, {skipped} stencils straddled a kink"),
    ))
}

fn tiny_config() -> NetConfig {
    NetConfig {
        in_channels: 1,
        hidden_channels: 2,
        num_layers: 2,
        kernel_size: 3,
        residual: true,
    }
}

fn hvp_oracle() -> Result<VerifyResult, dil_core::Error> {
    let cfg = tiny_config();
    let kind = LossKind::default();
    for attempt in 0..20u64 {
        let net = RestorationNet::init(cfg.clone(), seed::derive(303, attempt))?;
        let mut rng = seed::rng(seed::derive(404, attempt));
        let x = random_tensor(&[2, 1, 8, 8], &mut rng);
        let y = random_tensor(&[2, 1, 8, 8], &mut rng);
        let theta = net.params().clone();
        let grad = |t: &ParamVector| recorded(&net, t, &x, &y, kind).map(|r| r.1);
        let sig = |t: &ParamVector| recorded(&net, t, &x, &y, kind).map(|r| r.2);
        let base = sig(&theta)?;
        let mut smooth = true;
        for i in 0..theta.len() {
            for s in [1.0, -1.0] {
                let mut p = theta.clone();
                p.data_mut()[i] += s * dil_core::autodiff::BRUTE_FORCE_STEP;
                smooth &= sig(&p)? == base;
            }
        }
        let dirs: Vec<ParamVector> = (0..10)
            .map(|_| theta.with_data((0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect::<Result<_, _>>()?;
        for v in &dirs {
            let r = dil_core::autodiff::fd_radius(v);
            smooth &= sig(&theta.add_scaled(v, r)?)? == base && sig(&theta.add_scaled(v, -r)?)? == base;
        }
        if !smooth {
            continue;
        }
        let mut worst: f64 = 0.0;
        for v in &dirs {
            let fd = hvp(grad, &theta, v, HvpMethod::FiniteDiff)?;
            let bf = hvp(grad, &theta, v, HvpMethod::BruteForce)?;
            worst = worst.max(fd.sub(&bf)?.norm() / bf.norm());
        }
        return Ok(result(
            "hvp_oracle",
            worst <= 1e-4,
            worst,
            1e-4,
            format!("{} params, 10 directions, instance {attempt}", theta.len()),
        ));
    }
    Err(dil_core::Error::InvalidConfig("no kink-free instance found".into()))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0.ln()).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0.ln() - mx) * (p.1.ln() - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0.ln() - mx).powi(2)).sum();
    sxy / sxx
}

fn taylor_slope() -> Result<VerifyResult, dil_core::Error> {
    // single linear layer and a wide Charbonnier: a smooth instance
    let cfg = NetConfig {
        num_layers: 1,
        residual: false,
        ..NetConfig::default()
    };
    let net = RestorationNet::init(cfg, 0)?;
    let obj = NetObjective::new(&net, LossKind::Charbonnier { epsilon: 0.1 });
    let images = synth_corpus(0, 2, 64, 64)?;
    let set = ConfounderSet::awgn(&[5.0, 10.0, 15.0, 20.0])?;
    let batches: Vec<Vec<PatchPair>> = (0..4)
        .map(|i| sample_batch(&images, &set, SamplingMode::Serial(i), 2, 8, 100 + i as u64))
        .collect::<Result<_, _>>()?;
    let outer = sample_batch(&images, &set, SamplingMode::Outer, 4, 8, 7)?;
    let groups: Vec<&[PatchPair]> = batches.iter().map(Vec::as_slice).collect();
    let mut points = Vec::new();
    for alpha in [1e-2, 3e-3, 1e-3, 3e-4] {
        let ps = parallel_meta_gradient(&obj, net.params(), &groups, &outer, alpha, HvpMethod::FiniteDiff)?;
        let ss = serial_meta_gradient(&obj, net.params(), &groups, &outer, alpha, HvpMethod::FiniteDiff)?;
        points.push((alpha, ps.grad.sub(&ss.grad)?.max_abs()));
    }
    let slope = log_log_slope(&points);
    let detail = points.iter().map(|(a, d)| format!("{a:e}:{d:.3e}")).collect::<Vec<_>>().join(" ");
    Ok(result("taylor_slope", (1.8..=2.2).contains(&slope), slope, 2.0, detail))
}

fn erm_reduction() -> Result<VerifyResult, dil_core::Error> {
    let images = synth_corpus(5, 4, 64, 64)?;
    let set = ConfounderSet::awgn(&[5.0, 10.0, 15.0, 20.0])?;
    let net = RestorationNet::init(NetConfig::default(), 3)?;
    let steps = 20;
    let base = TrainConfig {
        iters: steps,
        patch: 16,
        seed: 21,
        ..TrainConfig::default()
    };
    let trajectory = |variant: Variant, alpha: f64| -> Result<Vec<ParamVector>, dil_core::Error> {
        let c = TrainConfig { variant, alpha, ..base.clone() };
        let mut out = Vec::new();
        let state = OptimState::new(&c, net.params().len());
        train_from(net.clone(), &images, &set, &c, state, |_, n, _| {
            out.push(n.params().clone());
            Ok(())
        })?;
        Ok(out)
    };
    let a = trajectory(Variant::Erm, base.alpha)?;
    let b = trajectory(Variant::DilPs, 0.0)?;
    let mut dev: f64 = if a.len() == b.len() { 0.0 } else { f64::INFINITY };
    for (p, q) in a.iter().zip(&b) {
        dev = dev.max(p.sub(q)?.max_abs());
    }
    Ok(result("erm_reduction", dev == 0.0, dev, 0.0, format!("{steps} steps, dil_ps with alpha=0 vs erm")))
}

fn sign_convention(variant: Variant) -> Result<VerifyResult, dil_core::Error> {
    let images = synth_corpus(77, 6, 64, 64)?;
    let set = ConfounderSet::awgn(&[0.0])?;
    let net = RestorationNet::init(NetConfig::default(), 6)?;
    let c = TrainConfig {
        variant,
        iters: 200,
        patch: 16,
        seed: 11,
        ..TrainConfig::default()
    };
    let probe = sample_batch(&images, &set, SamplingMode::Outer, 8, 16, 999)?;
    let before = NetObjective::new(&net, c.loss).loss(net.params(), &probe)?;
    let run = train(net, &images, &set, &c)?;
    if let Some(e) = run.abort {
        return Err(e);
    }
    let after = NetObjective::new(&run.net, c.loss).loss(run.net.params(), &probe)?;
    let ratio = after / before;
    Ok(result(
        &format!("sign_convention_{}", variant.name()),
        ratio < 0.5,
        ratio,
        0.5,
        format!("identity task, 200 iters, loss {before:.4e} -> {after:.4e}"),
    ))
}

fn adam_scalar() -> Result<VerifyResult, dil_core::Error> {
    let mut s = AdamState::outer(1, 0.1);
    let mut th = ParamVector::from_flat(vec![0.0]);
    for _ in 0..200 {
        let g = th.with_data(vec![th.data()[0] - 3.0])?;
        th = s.step(&th, &g)?;
    }
    let err = (th.data()[0] - 3.0).abs();
    Ok(result("adam_scalar", err < 0.05, err, 0.05, "200 steps on (t-3)^2/2, lr 0.1".into()))
}

fn awgn_std() -> Result<VerifyResult, dil_core::Error> {
    let clean = Tensor::full(&[3, 256, 256], 0.5);
    let noisy = add_gaussian_noise(&clean, 25.0, 12345)?;
    let n = clean.len() as f64;
    let d: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let rel = (std / (25.0 / 255.0) - 1.0).abs();
    Ok(result("awgn_std", rel <= 0.02, rel, 0.02, format!("std {std:.5} vs {:.5}", 25.0 / 255.0)))
}

fn jpeg_table() -> Result<VerifyResult, dil_core::Error> {
    let t = quant_table(50)?;
    let diff = t.iter().zip(&STANDARD_LUMINANCE_TABLE).filter(|(a, b)| a != b).count();
    Ok(result("jpeg_q50_table", diff == 0, diff as f64, 0.0, "entries differing from the standard table".into()))
}

fn blur_kernel_mass() -> Result<VerifyResult, dil_core::Error> {
    let mut worst: f64 = 0.0;
    for sigma in [0.5, 1.0, 2.0, 3.0, 4.0, 4.2, 4.4, 4.6, 4.8, 5.0] {
        let k = gaussian_kernel(sigma)?;
        worst = worst.max((k.data().iter().sum::<f64>() - 1.0).abs());
    }
    Ok(result("blur_kernel_mass", worst <= 1e-12, worst, 1e-12, "|sum - 1| over 10 sigmas".into()))
}

fn psnr_offset() -> Result<VerifyResult, dil_core::Error> {
    let a = Tensor::full(&[3, 16, 16], 0.25);
    let b = Tensor::full(&[3, 16, 16], 0.25 + 16.0 / 255.0);
    let err = (psnr(&a, &b, Channel::Rgb)? - 24.0485).abs();
    Ok(result("psnr_offset", err <= 1e-4, err, 1e-4, "constant 16/255 offset vs 24.0485 dB".into()))
}

fn ssim_identity() -> Result<VerifyResult, dil_core::Error> {
    let x = synth_corpus(9, 1, 64, 64)?.remove(0);
    let err = (ssim(x.pixels(), x.pixels(), Channel::Rgb)? - 1.0).abs();
    Ok(result("ssim_identity", err <= 1e-9, err, 1e-9, "ssim(x, x)".into()))
}

fn luma_green() -> Result<VerifyResult, dil_core::Error> {
    let mut g = Tensor::zeros(&[3, 1, 1]);
    g.data_mut()[1] = 1.0;
    let y = rgb_to_y(&g)?.data()[0];
    let err = (y - 0.587).abs();
    Ok(result("luma_green", err == 0.0, err, 0.0, format!("Y of pure green = {y}")))
}
