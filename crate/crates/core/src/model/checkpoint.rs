//! Parameter checkpoints.
//!
//! ```text
//! DILNET v1
//! config in_channels=3 hidden_channels=16 num_layers=3 kernel_size=3 residual=true
//! segments 6
//! conv0.weight 16 3 3 3
//! <16*3*3*3 little-endian f64>
//! conv0.bias 16
//! <16 little-endian f64>
//! ...
//! ```

use std::io::{BufRead, Write};

use super::{NetConfig, RestorationNet};
use crate::autodiff::ParamVector;
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "DILNET v1";

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "checkpoint",
        reason: reason.into(),
    }
}

pub(crate) fn read_text_line(r: &mut impl BufRead) -> Result<String> {
    let mut buf = Vec::new();
    r.read_until(b'\n', &mut buf)?;
    if buf.last() != Some(&b'\n') {
        return Err(malformed("unexpected end of file"));
    }
    buf.pop();
    String::from_utf8(buf).map_err(|_| malformed("non-utf8 text line"))
}

/// Writes the `segments N` block for `params`.
pub fn write_segments(w: &mut impl Write, params: &ParamVector) -> Result<()> {
    writeln!(w, "segments {}", params.segments().len())?;
    for seg in params.segments() {
        if seg.name.is_empty() || seg.name.contains(char::is_whitespace) {
            return Err(malformed(format!("segment name {:?} is not a single token", seg.name)));
        }
        let dims: Vec<String> = seg.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{} {}", seg.name, dims.join(" "))?;
        let mut bytes = Vec::with_capacity(seg.len() * 8);
        for v in &params.data()[seg.range()] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_segments(r: &mut impl BufRead) -> Result<ParamVector> {
    let line = read_text_line(r)?;
    let count: usize = line
        .strip_prefix("segments ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| malformed(format!("expected `segments N`, got {line:?}")))?;
    let mut layout = Vec::with_capacity(count);
    let mut data = Vec::new();
    for _ in 0..count {
        let line = read_text_line(r)?;
        let mut parts = line.split(' ');
        let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| malformed("empty segment name"))?;
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| malformed(format!("bad dimension in {line:?}"))))
            .collect::<Result<_>>()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(malformed(format!("bad shape in {line:?}")));
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|_| malformed("truncated segment data"))?;
        data.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
        layout.push((name.to_string(), shape));
    }
    let template = ParamVector::zeros_with_layout(layout);
    template.with_data(data)
}

pub fn write_checkpoint(w: &mut impl Write, net: &RestorationNet) -> Result<()> {
    let c = net.config();
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    writeln!(
        w,
        "config in_channels={} hidden_channels={} num_layers={} kernel_size={} residual={}",
        c.in_channels, c.hidden_channels, c.num_layers, c.kernel_size, c.residual
    )?;
    write_segments(w, net.params())
}

pub fn read_checkpoint(r: &mut impl BufRead) -> Result<RestorationNet> {
    if read_text_line(r)? != CHECKPOINT_HEADER {
        return Err(malformed("missing DILNET v1 header"));
    }
    let line = read_text_line(r)?;
    let fields = line
        .strip_prefix("config ")
        .ok_or_else(|| malformed("missing config line"))?;
    let mut config = NetConfig::default();
    for kv in fields.split(' ') {
        let (k, v) = kv.split_once('=').ok_or_else(|| malformed(format!("bad config field {kv:?}")))?;
        let num = || v.parse::<usize>().map_err(|_| malformed(format!("bad value in {kv:?}")));
        match k {
            "in_channels" => config.in_channels = num()?,
            "hidden_channels" => config.hidden_channels = num()?,
            "num_layers" => config.num_layers = num()?,
            "kernel_size" => config.kernel_size = num()?,
            "residual" => {
                config.residual = v.parse().map_err(|_| malformed(format!("bad value in {kv:?}")))?
            }
            _ => return Err(malformed(format!("unknown config field {k:?}"))),
        }
    }
    let params = read_segments(r)?;
    RestorationNet::from_params(config, params)
}
