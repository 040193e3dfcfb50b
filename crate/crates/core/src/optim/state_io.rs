//! Optimizer-state files, so a resumed run continues bit for bit.
//!
//! ```text
//! DILOPT v1
//! iteration 50
//! outer t=50 beta1=0.9 beta2=0.999 eps=1e-8 lr=0.001
//! virtual t=0 beta1=0.0 beta2=0.999 eps=1e-8 lr=0.001
//! segments 4
//! outer.m <len> ...
//! ```

use std::io::{BufRead, Write};

use super::adam::AdamState;
use super::train::OptimState;
use crate::autodiff::{ParamVector, Tensor};
use crate::error::{Error, Result};
use crate::model::{read_segments, write_segments};

pub const OPTIM_HEADER: &str = "DILOPT v1";

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "optimizer state",
        reason: reason.into(),
    }
}

fn adam_line(tag: &str, s: &AdamState) -> String {
    format!(
        "{tag} t={} beta1={:?} beta2={:?} eps={:?} lr={:?}",
        s.t, s.beta1, s.beta2, s.eps, s.lr
    )
}

fn parse_adam_line(tag: &str, line: &str, len: usize) -> Result<AdamState> {
    let rest = line
        .strip_prefix(tag)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| malformed(format!("expected `{tag} ...`, got {line:?}")))?;
    let mut s = AdamState::new(len, 0.0, 0.0, 0.0);
    let mut seen = 0;
    for kv in rest.split(' ') {
        let (k, v) = kv.split_once('=').ok_or_else(|| malformed(format!("bad field {kv:?}")))?;
        let f = || v.parse::<f64>().map_err(|_| malformed(format!("bad value in {kv:?}")));
        match k {
            "t" => s.t = v.parse().map_err(|_| malformed(format!("bad value in {kv:?}")))?,
            "beta1" => s.beta1 = f()?,
            "beta2" => s.beta2 = f()?,
            "eps" => s.eps = f()?,
            "lr" => s.lr = f()?,
            _ => return Err(malformed(format!("unknown field {k:?}"))),
        }
        seen += 1;
    }
    if seen != 5 {
        return Err(malformed(format!("incomplete line {line:?}")));
    }
    Ok(s)
}

pub fn write_optim_state(w: &mut impl Write, state: &OptimState) -> Result<()> {
    writeln!(w, "{OPTIM_HEADER}")?;
    writeln!(w, "iteration {}", state.iteration)?;
    writeln!(w, "{}", adam_line("outer", &state.outer))?;
    writeln!(w, "{}", adam_line("virtual", &state.virtual_adam))?;
    let len = state.outer.m.len();
    let buffers = [
        ("outer.m", &state.outer.m),
        ("outer.v", &state.outer.v),
        ("virtual.m", &state.virtual_adam.m),
        ("virtual.v", &state.virtual_adam.v),
    ];
    let tensors = buffers
        .into_iter()
        .map(|(name, data)| Ok((name, Tensor::new(vec![data.len()], data.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    if tensors.iter().any(|(_, t)| t.len() != len) {
        return Err(malformed("moment buffers differ in length"));
    }
    write_segments(w, &ParamVector::flatten(tensors))
}

pub fn read_optim_state(r: &mut impl BufRead) -> Result<OptimState> {
    let line = |r: &mut _| crate::model::read_text_line(r);
    if line(r)? != OPTIM_HEADER {
        return Err(malformed("missing DILOPT v1 header"));
    }
    let it = line(r)?;
    let iteration = it
        .strip_prefix("iteration ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| malformed(format!("expected `iteration N`, got {it:?}")))?;
    let outer_line = line(r)?;
    let virtual_line = line(r)?;
    let buffers = read_segments(r)?;
    let names: Vec<&str> = buffers.segments().iter().map(|s| s.name.as_str()).collect();
    if names != ["outer.m", "outer.v", "virtual.m", "virtual.v"] {
        return Err(malformed(format!("unexpected segments {names:?}")));
    }
    let get = |n: &str| buffers.segment(n).expect("checked above").to_vec();
    let len = get("outer.m").len();
    if names.iter().any(|n| get(n).len() != len) {
        return Err(malformed("moment buffers differ in length"));
    }
    let mut outer = parse_adam_line("outer", &outer_line, len)?;
    outer.m = get("outer.m");
    outer.v = get("outer.v");
    let mut virtual_adam = parse_adam_line("virtual", &virtual_line, len)?;
    virtual_adam.m = get("virtual.m");
    virtual_adam.v = get("virtual.v");
    Ok(OptimState {
        iteration,
        outer,
        virtual_adam,
    })
}
