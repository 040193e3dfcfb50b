use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::quality::{psnr, ssim, Channel};
use crate::degradation::{apply_distortion, CleanImage, ConfounderSet, DistortionSpec};
use crate::error::{Error, Result};
use crate::model::RestorationNet;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub dataset_id: String,
    pub spec: DistortionSpec,
    pub seen: bool,
    pub psnr_db: f64,
    pub ssim: f64,
    pub channel: Channel,
}

/// PSNR drop of an unseen spec against the best seen spec of its dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GapRow {
    pub dataset_id: String,
    pub spec: DistortionSpec,
    pub best_seen: DistortionSpec,
    pub best_seen_psnr_db: f64,
    pub psnr_db: f64,
    pub gap_db: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub gaps: Vec<GapRow>,
}

/// Restores `x` and clamps the result to the valid range.
pub fn restore(net: &RestorationNet, x: &crate::autodiff::Tensor) -> Result<crate::autodiff::Tensor> {
    let s = x.shape().to_vec();
    let mut batch = vec![1];
    batch.extend_from_slice(&s);
    let mut y = net.forward(&x.reshape(&batch)?)?.reshape(&s)?;
    y.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(y)
}

/// Seed used to distort image `image` of dataset `dataset` under spec
/// `spec` (indices into the evaluation order).
pub fn eval_distortion_seed(seed: u64, dataset: usize, spec: usize, image: usize) -> u64 {
    seed::derive_path(seed, &[dataset as u64, spec as u64, image as u64])
}

/// Mean PSNR/SSIM of `net` for every dataset under every seen and unseen
/// spec. Full images are distorted, restored and compared; datasets are
/// visited in key order, specs seen-first in the given order.
pub fn evaluate(
    net: &RestorationNet,
    datasets: &BTreeMap<String, Vec<CleanImage>>,
    seen: &ConfounderSet,
    unseen: &[DistortionSpec],
    seed: u64,
    channel: Channel,
) -> Result<EvalReport> {
    if datasets.is_empty() || datasets.values().any(Vec::is_empty) {
        return Err(Error::InvalidConfig("evaluation needs non-empty datasets".into()));
    }
    for s in unseen {
        s.validate()?;
    }
    let specs: Vec<(&DistortionSpec, bool)> = seen
        .specs()
        .iter()
        .map(|s| (s, true))
        .chain(unseen.iter().map(|s| (s, false)))
        .collect();
    let mut report = EvalReport::default();
    for (di, (id, images)) in datasets.iter().enumerate() {
        let first = report.rows.len();
        for (si, &(spec, is_seen)) in specs.iter().enumerate() {
            let (mut p, mut s) = (0.0, 0.0);
            for (ii, img) in images.iter().enumerate() {
                let x = apply_distortion(img, spec, eval_distortion_seed(seed, di, si, ii))?;
                let y = restore(net, &x)?;
                p += psnr(&y, img.pixels(), channel)?;
                s += ssim(&y, img.pixels(), channel)?;
            }
            let n = images.len() as f64;
            report.rows.push(EvalRow {
                dataset_id: id.clone(),
                spec: spec.clone(),
                seen: is_seen,
                psnr_db: p / n,
                ssim: s / n,
                channel,
            });
        }
        let rows = &report.rows[first..];
        let best = rows
            .iter()
            .filter(|r| r.seen)
            .fold(None::<&EvalRow>, |b, r| match b {
                Some(b) if b.psnr_db >= r.psnr_db => Some(b),
                _ => Some(r),
            })
            .expect("seen set is non-empty");
        let gaps: Vec<GapRow> = rows
            .iter()
            .filter(|r| !r.seen)
            .map(|r| GapRow {
                dataset_id: id.clone(),
                spec: r.spec.clone(),
                best_seen: best.spec.clone(),
                best_seen_psnr_db: best.psnr_db,
                psnr_db: r.psnr_db,
                gap_db: best.psnr_db - r.psnr_db,
            })
            .collect();
        report.gaps.extend(gaps);
    }
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct RowRecord {
    dataset_id: String,
    spec_kind: String,
    spec_params: String,
    seen: bool,
    channel: Channel,
    psnr_db: f64,
    ssim: f64,
}

#[derive(Serialize, Deserialize)]
struct GapRecord {
    dataset_id: String,
    spec_kind: String,
    spec_params: String,
    best_seen_kind: String,
    best_seen_params: String,
    best_seen_psnr_db: f64,
    psnr_db: f64,
    gap_db: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        format: "csv",
        reason: e.to_string(),
    }
}

impl EvalReport {
    pub fn write_rows_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(RowRecord {
                dataset_id: r.dataset_id.clone(),
                spec_kind: r.spec.kind().into(),
                spec_params: r.spec.params_string(),
                seen: r.seen,
                channel: r.channel,
                psnr_db: r.psnr_db,
                ssim: r.ssim,
            })
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_gaps_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for g in &self.gaps {
            out.serialize(GapRecord {
                dataset_id: g.dataset_id.clone(),
                spec_kind: g.spec.kind().into(),
                spec_params: g.spec.params_string(),
                best_seen_kind: g.best_seen.kind().into(),
                best_seen_params: g.best_seen.params_string(),
                best_seen_psnr_db: g.best_seen_psnr_db,
                psnr_db: g.psnr_db,
                gap_db: g.gap_db,
            })
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_rows_csv(r: impl Read) -> Result<Vec<EvalRow>> {
        csv::Reader::from_reader(r)
            .deserialize::<RowRecord>()
            .map(|rec| {
                let rec = rec.map_err(csv_err)?;
                Ok(EvalRow {
                    spec: DistortionSpec::from_parts(&rec.spec_kind, &rec.spec_params)?,
                    dataset_id: rec.dataset_id,
                    seen: rec.seen,
                    psnr_db: rec.psnr_db,
                    ssim: rec.ssim,
                    channel: rec.channel,
                })
            })
            .collect()
    }

    pub fn read_gaps_csv(r: impl Read) -> Result<Vec<GapRow>> {
        csv::Reader::from_reader(r)
            .deserialize::<GapRecord>()
            .map(|rec| {
                let rec = rec.map_err(csv_err)?;
                Ok(GapRow {
                    spec: DistortionSpec::from_parts(&rec.spec_kind, &rec.spec_params)?,
                    best_seen: DistortionSpec::from_parts(&rec.best_seen_kind, &rec.best_seen_params)?,
                    dataset_id: rec.dataset_id,
                    best_seen_psnr_db: rec.best_seen_psnr_db,
                    psnr_db: rec.psnr_db,
                    gap_db: rec.gap_db,
                })
            })
            .collect()
    }

    /// Row for `(dataset, spec)`, if evaluated.
    pub fn row(&self, dataset_id: &str, spec: &DistortionSpec) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.dataset_id == dataset_id && &r.spec == spec)
    }
}
