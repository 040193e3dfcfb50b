//! Forward and backward kernels for every graph operation.

use std::fmt;
use std::str::FromStr;

use super::gemm::{gemm, View};
use super::tensor::numel;
use crate::error::{Error, Result};

/// Operation tags understood by the graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Valid (unpadded) stride-1 cross-correlation.
    /// Inputs: `x[B,C,H,W]`, `w[O,C,kh,kw]` and optionally `b[O]`.
    Conv2d,
    Add,
    Sub,
    MulScalar(f64),
    Relu,
    /// Reflect-pads the last two axes by the given amount on each side.
    PadReflect(usize),
    Sum,
    Mean,
    Abs,
    Sqrt,
    Square,
    Clamp { lo: f64, hi: f64 },
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Conv2d => "conv2d",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::MulScalar(_) => "mul_scalar",
            Op::Relu => "relu",
            Op::PadReflect(_) => "pad_reflect",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Clamp { .. } => "clamp",
        }
    }

    /// Ops whose derivative has a jump: the sign pattern of their input
    /// identifies the smooth piece the function is evaluated on.
    pub(crate) fn is_piecewise(&self) -> bool {
        matches!(self, Op::Relu | Op::Abs | Op::Clamp { .. })
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::MulScalar(c) => write!(f, "mul_scalar:{c}"),
            Op::PadReflect(p) => write!(f, "pad_reflect:{p}"),
            Op::Clamp { lo, hi } => write!(f, "clamp:{lo}:{hi}"),
            other => f.write_str(other.tag()),
        }
    }
}

impl FromStr for Op {
    type Err = Error;

    /// Parses `tag` or `tag:arg[:arg]`, e.g. `relu`, `mul_scalar:0.5`,
    /// `pad_reflect:1`, `clamp:0:1`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let tag = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let bad = || Error::UnknownOp(s.to_string());
        let num = |i: usize| -> Result<f64> {
            args.get(i)
                .and_then(|a| a.parse::<f64>().ok())
                .ok_or_else(bad)
        };
        let op = match (tag, args.len()) {
            ("conv2d", 0) => Op::Conv2d,
            ("add", 0) => Op::Add,
            ("sub", 0) => Op::Sub,
            ("relu", 0) => Op::Relu,
            ("sum", 0) => Op::Sum,
            ("mean", 0) => Op::Mean,
            ("abs", 0) => Op::Abs,
            ("sqrt", 0) => Op::Sqrt,
            ("square", 0) => Op::Square,
            ("mul_scalar", 1) => Op::MulScalar(num(0)?),
            ("pad_reflect", 1) => Op::PadReflect(args[0].parse().map_err(|_| bad())?),
            ("clamp", 2) => Op::Clamp {
                lo: num(0)?,
                hi: num(1)?,
            },
            _ => return Err(bad()),
        };
        Ok(op)
    }
}

pub(crate) struct Forward {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Op-specific saved state (im2col buffers for conv2d).
    pub cache: Option<Vec<f64>>,
}

pub(crate) type Operand<'a> = (&'a [usize], &'a [f64]);

fn mismatch(op: &Op, inputs: &[Operand<'_>]) -> Error {
    Error::ShapeMismatch {
        op: op.tag().to_string(),
        shapes: inputs.iter().map(|(s, _)| s.to_vec()).collect(),
    }
}

fn arity(op: &Op) -> (usize, usize) {
    match op {
        Op::Conv2d => (2, 3),
        Op::Add | Op::Sub => (2, 2),
        _ => (1, 1),
    }
}

/// Mirror reflection without repeating the edge sample (`-1 -> 1`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_dims(op: &Op, inputs: &[Operand<'_>]) -> Result<ConvDims> {
    let (xs, ws) = (inputs[0].0, inputs[1].0);
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || xs[2] < ws[2] || xs[3] < ws[3] {
        return Err(mismatch(op, inputs));
    }
    if let Some((bs, _)) = inputs.get(2) {
        if bs.len() != 1 || bs[0] != ws[0] {
            return Err(mismatch(op, inputs));
        }
    }
    Ok(ConvDims {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        ho: xs[2] - ws[2] + 1,
        wo: xs[3] - ws[3] + 1,
    })
}

/// Appends the `[k, p]` column matrix of one image to `cols`.
fn im2col(d: &ConvDims, x: &[f64], cols: &mut Vec<f64>) {
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                for y in 0..d.ho {
                    cols.extend_from_slice(&plane[(y + i) * d.w + j..(y + i) * d.w + j + d.wo]);
                }
            }
        }
    }
}

fn col2im_add(d: &ConvDims, cols: &[f64], x: &mut [f64]) {
    let p = d.p();
    for c in 0..d.cin {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for y in 0..d.ho {
                    let dst = &mut plane[(y + i) * d.w + j..(y + i) * d.w + j + d.wo];
                    for (o, s) in dst.iter_mut().zip(&src[y * d.wo..(y + 1) * d.wo]) {
                        *o += s;
                    }
                }
            }
        }
    }
}

/// Neumaier summation.
fn compensated_sum(x: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in x {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

pub(crate) fn forward(op: &Op, inputs: &[Operand<'_>]) -> Result<Forward> {
    let (lo, hi) = arity(op);
    if inputs.len() < lo || inputs.len() > hi {
        return Err(mismatch(op, inputs));
    }
    let (s0, x) = inputs[0];
    let unary = |f: &dyn Fn(f64) -> f64| Forward {
        shape: s0.to_vec(),
        data: x.iter().map(|&v| f(v)).collect(),
        cache: None,
    };
    let out = match op {
        Op::Conv2d => {
            let d = conv_dims(op, inputs)?;
            let (k, p) = (d.k(), d.p());
            let w = inputs[1].1;
            let mut cols = Vec::with_capacity(d.batch * k * p);
            let mut out = vec![0.0; d.batch * d.cout * p];
            let in_stride = d.cin * d.h * d.w;
            for b in 0..d.batch {
                im2col(&d, &x[b * in_stride..(b + 1) * in_stride], &mut cols);
                let cb = &cols[b * k * p..(b + 1) * k * p];
                let ob = &mut out[b * d.cout * p..(b + 1) * d.cout * p];
                gemm(View::row_major(w, d.cout, k), View::row_major(cb, k, p), 0.0, ob);
                if let Some((_, bias)) = inputs.get(2) {
                    for (o, &bv) in bias.iter().enumerate() {
                        ob[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
            Forward {
                shape: vec![d.batch, d.cout, d.ho, d.wo],
                data: out,
                cache: Some(cols),
            }
        }
        Op::Add | Op::Sub => {
            let (s1, y) = inputs[1];
            if s0 != s1 {
                return Err(mismatch(op, inputs));
            }
            let data = if *op == Op::Add {
                x.iter().zip(y).map(|(a, b)| a + b).collect()
            } else {
                x.iter().zip(y).map(|(a, b)| a - b).collect()
            };
            Forward {
                shape: s0.to_vec(),
                data,
                cache: None,
            }
        }
        Op::MulScalar(c) => unary(&|v| c * v),
        Op::Relu => unary(&|v| if v > 0.0 { v } else { 0.0 }),
        Op::Abs => unary(&f64::abs),
        Op::Sqrt => unary(&f64::sqrt),
        Op::Square => unary(&|v| v * v),
        Op::Clamp { lo, hi } => {
            if !(lo <= hi) {
                return Err(mismatch(op, inputs));
            }
            unary(&|v| v.clamp(*lo, *hi))
        }
        Op::Sum => Forward {
            shape: vec![1],
            data: vec![compensated_sum(x)],
            cache: None,
        },
        Op::Mean => Forward {
            shape: vec![1],
            data: vec![compensated_sum(x) / x.len() as f64],
            cache: None,
        },
        Op::PadReflect(p) => {
            if s0.len() < 2 {
                return Err(mismatch(op, inputs));
            }
            let (h, w) = (s0[s0.len() - 2], s0[s0.len() - 1]);
            let (ho, wo) = (h + 2 * p, w + 2 * p);
            let lead = numel(&s0[..s0.len() - 2]);
            let mut data = vec![0.0; lead * ho * wo];
            for l in 0..lead {
                let src = &x[l * h * w..(l + 1) * h * w];
                let dst = &mut data[l * ho * wo..(l + 1) * ho * wo];
                for y in 0..ho {
                    let sy = reflect(y as isize - *p as isize, h);
                    for xx in 0..wo {
                        dst[y * wo + xx] = src[sy * w + reflect(xx as isize - *p as isize, w)];
                    }
                }
            }
            let mut shape = s0.to_vec();
            let n = shape.len();
            shape[n - 2] = ho;
            shape[n - 1] = wo;
            Forward {
                shape,
                data,
                cache: None,
            }
        }
    };
    Ok(out)
}

/// Vector-Jacobian products. `needs[i]` selects which input gradients to
/// materialize; the rest come back as `None`.
pub(crate) fn backward(
    op: &Op,
    inputs: &[Operand<'_>],
    out: &[f64],
    cache: Option<&[f64]>,
    gy: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (_, x) = inputs[0];
    let map1 = |f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some(
            x.iter()
                .zip(out)
                .zip(gy)
                .map(|((&xv, &yv), &g)| f(xv, yv, g))
                .collect(),
        )]
    };
    match op {
        Op::Conv2d => {
            let d = conv_dims(op, inputs).expect("shapes validated in forward");
            let (k, p) = (d.k(), d.p());
            let cols = cache.expect("conv2d caches im2col buffers");
            let w = inputs[1].1;
            let mut gx = needs[0].then(|| vec![0.0; x.len()]);
            let mut gw = needs[1].then(|| vec![0.0; w.len()]);
            let mut gb = (inputs.len() == 3 && needs[2]).then(|| vec![0.0; d.cout]);
            let mut dcols = gx.as_ref().map(|_| vec![0.0; k * p]);
            let in_stride = d.cin * d.h * d.w;
            for b in 0..d.batch {
                let gyb = &gy[b * d.cout * p..(b + 1) * d.cout * p];
                if let Some(gw) = gw.as_mut() {
                    let cb = &cols[b * k * p..(b + 1) * k * p];
                    gemm(
                        View::row_major(gyb, d.cout, p),
                        View::row_major(cb, k, p).t(),
                        1.0,
                        gw,
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        *acc += gyb[o * p..(o + 1) * p].iter().sum::<f64>();
                    }
                }
                if let (Some(gx), Some(dc)) = (gx.as_mut(), dcols.as_mut()) {
                    gemm(
                        View::row_major(w, d.cout, k).t(),
                        View::row_major(gyb, d.cout, p),
                        0.0,
                        dc,
                    );
                    col2im_add(&d, dc, &mut gx[b * in_stride..(b + 1) * in_stride]);
                }
            }
            let mut res = vec![gx, gw];
            if inputs.len() == 3 {
                res.push(gb);
            }
            res
        }
        Op::Add => vec![
            needs[0].then(|| gy.to_vec()),
            needs[1].then(|| gy.to_vec()),
        ],
        Op::Sub => vec![
            needs[0].then(|| gy.to_vec()),
            needs[1].then(|| gy.iter().map(|g| -g).collect()),
        ],
        Op::MulScalar(c) => vec![Some(gy.iter().map(|g| c * g).collect())],
        Op::Relu => map1(&|xv, _, g| if xv > 0.0 { g } else { 0.0 }),
        Op::Abs => map1(&|xv, _, g| {
            if xv > 0.0 {
                g
            } else if xv < 0.0 {
                -g
            } else {
                0.0
            }
        }),
        Op::Sqrt => map1(&|_, yv, g| g / (2.0 * yv)),
        Op::Square => map1(&|xv, _, g| 2.0 * xv * g),
        Op::Clamp { lo, hi } => map1(&|xv, _, g| if xv >= *lo && xv <= *hi { g } else { 0.0 }),
        Op::Sum => vec![Some(vec![gy[0]; x.len()])],
        Op::Mean => vec![Some(vec![gy[0] / x.len() as f64; x.len()])],
        Op::PadReflect(p) => {
            let s0 = inputs[0].0;
            let (h, w) = (s0[s0.len() - 2], s0[s0.len() - 1]);
            let (ho, wo) = (h + 2 * p, w + 2 * p);
            let lead = numel(&s0[..s0.len() - 2]);
            let mut gx = vec![0.0; x.len()];
            for l in 0..lead {
                let src = &gy[l * ho * wo..(l + 1) * ho * wo];
                let dst = &mut gx[l * h * w..(l + 1) * h * w];
                for y in 0..ho {
                    let sy = reflect(y as isize - *p as isize, h);
                    for xx in 0..wo {
                        dst[sy * w + reflect(xx as isize - *p as isize, w)] += src[y * wo + xx];
                    }
                }
            }
            vec![Some(gx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }

    #[test]
    fn tags_round_trip_through_strings() {
        for op in [
            Op::Conv2d,
            Op::Add,
            Op::Sub,
            Op::MulScalar(2.5),
            Op::Relu,
            Op::PadReflect(2),
            Op::Sum,
            Op::Mean,
            Op::Abs,
            Op::Sqrt,
            Op::Square,
            Op::Clamp { lo: 0.0, hi: 1.0 },
        ] {
            assert_eq!(op.to_string().parse::<Op>().unwrap(), op);
        }
        assert!(matches!("softmax".parse::<Op>(), Err(Error::UnknownOp(_))));
        assert!("mul_scalar".parse::<Op>().is_err());
    }
}
