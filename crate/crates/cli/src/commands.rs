//! The `synth-data`, `train`, `eval` and `report` commands.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dil_core::degradation::{
    counterfactual_augment, read_ppm, synth_corpus, write_ppm, CleanImage, ConfounderSet, DistortionSpec,
};
use dil_core::metrics::{evaluate, EvalReport, EvalRow};
use dil_core::model::{read_checkpoint, write_checkpoint, RestorationNet};
use dil_core::optim::{read_optim_state, train_until, write_optim_state, OptimState, StepReport};
use dil_core::seed;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::CliError;

const TAG_TRAIN_IMAGES: u64 = 0;
const TAG_EVAL_IMAGES: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_RENDER: u64 = 4;

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const RUN_SUMMARY: &str = "run_summary.json";
pub const RUN_TIMING: &str = "run_timing.json";
pub const FINAL_MODEL: &str = "model.dilnet";

/// Seed of the initial network weights.
pub fn init_seed(cfg: &ExperimentConfig) -> u64 {
    seed::derive(cfg.seed, TAG_INIT)
}

/// Seed handed to `evaluate`.
pub fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    seed::derive(cfg.seed, TAG_EVAL)
}

/// Training images and evaluation datasets named by id.
pub fn load_images(cfg: &ExperimentConfig) -> Result<(Vec<CleanImage>, BTreeMap<String, Vec<CleanImage>>), CliError> {
    match &cfg.dataset {
        DatasetConfig::Procedural { count, eval_count, h, w, seed: s } => {
            let train = synth_corpus(seed::derive(*s, TAG_TRAIN_IMAGES), *count, *h, *w)?;
            let eval = synth_corpus(seed::derive(*s, TAG_EVAL_IMAGES), *eval_count, *h, *w)?;
            Ok((train, BTreeMap::from([("synth".to_string(), eval)])))
        }
        DatasetConfig::Directory { train_dir, eval_dir } => {
            let train = read_ppm_dir(train_dir)?;
            let id = eval_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "eval".into());
            Ok((train, BTreeMap::from([(id, read_ppm_dir(eval_dir)?)])))
        }
    }
}

fn read_ppm_dir(dir: &Path) -> Result<Vec<CleanImage>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no .ppm files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok(CleanImage::new(read_ppm(p)?, id)?)
        })
        .collect()
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", p.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io("json", e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(&path.display().to_string(), e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub clean: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRendition {
    pub image: String,
    pub spec: DistortionSpec,
    pub seen: bool,
    pub path: String,
}

/// Index of a synthesized corpus; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub train_specs: Vec<DistortionSpec>,
    pub test_specs: Vec<DistortionSpec>,
    pub images: Vec<ManifestImage>,
    pub renditions: Vec<ManifestRendition>,
}

/// Writes every training image and its rendition under each train and test
/// spec to `<output_dir>/data`.
pub fn synth_data(cfg: &ExperimentConfig) -> Result<Manifest, CliError> {
    let (images, _) = load_images(cfg)?;
    let root = cfg.output_dir.join("data");
    create_dir(&root.join("clean"))?;
    let mut all = cfg.train_specs.clone();
    all.extend(cfg.test_specs.iter().cloned());
    let set = ConfounderSet::new(all)?;
    for spec in set.specs() {
        create_dir(&root.join(spec.slug()))?;
    }
    let mut manifest = Manifest {
        seed: cfg.seed,
        train_specs: cfg.train_specs.clone(),
        test_specs: cfg.test_specs.clone(),
        images: Vec::new(),
        renditions: Vec::new(),
    };
    let render_seed = seed::derive(cfg.seed, TAG_RENDER);
    for (i, img) in images.iter().enumerate() {
        let id = img.source_id().to_string();
        let clean = format!("clean/{id}.ppm");
        write_ppm(&root.join(&clean), img.pixels())?;
        let views = counterfactual_augment(img, &set, seed::derive(render_seed, i as u64))?;
        for (k, (spec, view)) in set.specs().iter().zip(views).enumerate() {
            let path = format!("{}/{id}.ppm", spec.slug());
            write_ppm(&root.join(&path), &view)?;
            manifest.renditions.push(ManifestRendition {
                image: id.clone(),
                spec: spec.clone(),
                seen: k < cfg.train_specs.len(),
                path,
            });
        }
        manifest.images.push(ManifestImage { id, clean });
    }
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn save_model(path: &Path, net: &RestorationNet, state: &OptimState) -> Result<(), CliError> {
    let io = |e: dil_core::Error| CliError::io(&path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(&path.display().to_string(), e))?);
    write_checkpoint(&mut w, net).map_err(io)?;
    w.flush().map_err(|e| CliError::io("flush", e))?;
    let opt = path.with_extension("dilopt");
    let mut w = BufWriter::new(File::create(&opt).map_err(|e| CliError::io(&opt.display().to_string(), e))?);
    write_optim_state(&mut w, state).map_err(io)?;
    w.flush().map_err(|e| CliError::io("flush", e))
}

pub fn load_net(path: &Path) -> Result<RestorationNet, CliError> {
    let f = File::open(path).map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", path.display())))?;
    Ok(read_checkpoint(&mut BufReader::new(f))?)
}

pub fn load_optim_state(path: &Path) -> Result<OptimState, CliError> {
    let f = File::open(path).map_err(|e| CliError::Usage(format!("optimizer state {}: {e}", path.display())))?;
    Ok(read_optim_state(&mut BufReader::new(f))?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub iterations_completed: usize,
    pub final_outer_loss: Option<f64>,
    pub final_grad_norm: Option<f64>,
    pub aborted: Option<String>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunTiming {
    pub wall_seconds: f64,
    pub steps_this_run: usize,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn log_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = ["iteration", "variant", "outer_loss", "grad_norm", "lr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=n).map(|i| format!("inner_loss_{i}")));
    h
}

fn log_record(r: &StepReport, variant: &str, n: usize) -> Vec<String> {
    let mut rec = vec![
        r.iteration.to_string(),
        variant.to_string(),
        fmt_f64(r.outer_loss),
        fmt_f64(r.grad_norm),
        fmt_f64(r.lr),
    ];
    rec.extend((0..n).map(|i| r.per_confounder_inner_loss.get(i).map(|&v| fmt_f64(v)).unwrap_or_default()));
    rec
}

/// Trains the configured variant, from scratch or from `resume` (a
/// `.dilnet` checkpoint with its sibling `.dilopt`), stopping after `until`
/// steps when given. Rows are appended to the training log after every
/// step, so an aborted run keeps its partial log.
pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>, until: Option<usize>) -> Result<RunSummary, CliError> {
    let started = Instant::now();
    let (images, _) = load_images(cfg)?;
    let set = cfg.train_set()?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let (net, state) = match resume {
        Some(p) => {
            let net = load_net(p)?;
            if net.config() != &cfg.net {
                return Err(CliError::Usage(format!("checkpoint {} was built for a different net", p.display())));
            }
            let state = load_optim_state(&p.with_extension("dilopt"))?;
            if state.iteration > cfg.train.iters {
                return Err(CliError::Usage(format!(
                    "checkpoint is at iteration {} beyond train.iters = {}",
                    state.iteration, cfg.train.iters
                )));
            }
            (net, state)
        }
        None => {
            let net = RestorationNet::init(cfg.net.clone(), init_seed(cfg))?;
            let state = OptimState::new(&cfg.train, net.params().len());
            (net, state)
        }
    };
    let start_iter = state.iteration;

    let n = set.len();
    let variant = cfg.train.variant.name();
    let log_path = out.join(TRAIN_LOG);
    let append = resume.is_some() && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path.display().to_string(), e))?;
    let mut log = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| dil_core::Error::Io(e.to_string());
    if !append {
        log.write_record(log_header(n)).map_err(|e| CliError::io("log", e))?;
    }

    let ckpt_dir = out.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let stop = until.unwrap_or(cfg.train.iters);
    let run = train_until(net, &images, &set, &cfg.train, state, stop, |r, net, st| {
        log.write_record(log_record(r, variant, n)).map_err(csv_err)?;
        log.flush()?;
        if cfg.checkpoint_every > 0 && st.iteration % cfg.checkpoint_every == 0 {
            let p = ckpt_dir.join(format!("iter_{:06}.dilnet", st.iteration));
            save_model(&p, net, st).map_err(|e| dil_core::Error::Io(e.to_string()))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| CliError::io("log", e))?;

    let last = run.reports.last();
    let summary = RunSummary {
        variant: variant.to_string(),
        iterations_completed: run.state.iteration,
        final_outer_loss: last.map(|r| r.outer_loss),
        final_grad_norm: last.map(|r| r.grad_norm),
        aborted: run.abort.as_ref().map(|e| e.to_string()),
        config: cfg.clone(),
    };
    write_json(&out.join(RUN_SUMMARY), &summary)?;
    write_json(
        &out.join(RUN_TIMING),
        &RunTiming {
            wall_seconds: started.elapsed().as_secs_f64(),
            steps_this_run: run.state.iteration - start_iter,
        },
    )?;
    if let Some(e) = run.abort {
        return Err(CliError::Runtime(format!("training stopped at iteration {}: {e}", run.state.iteration)));
    }
    save_model(&out.join(FINAL_MODEL), &run.net, &run.state)?;
    Ok(summary)
}

/// Label for a checkpoint path: its file stem.
pub fn checkpoint_label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// Evaluates each checkpoint over the train (seen) and test (unseen)
/// specs. Writes `<label>.rows.csv` and `<label>.gaps.csv` per checkpoint
/// and one `plot.csv` with a PSNR-vs-level series per checkpoint.
pub fn eval(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<Vec<(String, EvalReport)>, CliError> {
    let mut labels: Vec<String> = checkpoints.iter().map(|p| checkpoint_label(p)).collect();
    let mut sorted = labels.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != labels.len() {
        // same stem in different directories
        labels = checkpoints.iter().enumerate().map(|(i, p)| format!("{}_{i}", checkpoint_label(p))).collect();
    }
    let nets = checkpoints.iter().map(|p| load_net(p)).collect::<Result<Vec<_>, _>>()?;
    let (_, datasets) = load_images(cfg)?;
    let set = cfg.train_set()?;
    let dir = cfg.output_dir.join("eval");
    create_dir(&dir)?;

    let mut plot = csv::Writer::from_writer(Vec::new());
    plot.write_record(["series", "dataset_id", "spec_kind", "spec_params", "level", "seen", "psnr_db", "ssim"])
        .map_err(|e| CliError::io("plot", e))?;
    let mut reports = Vec::new();
    for (label, net) in labels.into_iter().zip(nets) {
        let report = evaluate(&net, &datasets, &set, &cfg.test_specs, eval_seed(cfg), cfg.channel)?;
        let mut rows = Vec::new();
        report.write_rows_csv(&mut rows)?;
        write_file(&dir.join(format!("{label}.rows.csv")), &rows)?;
        let mut gaps = Vec::new();
        report.write_gaps_csv(&mut gaps)?;
        write_file(&dir.join(format!("{label}.gaps.csv")), &gaps)?;
        for r in &report.rows {
            plot.write_record([
                label.clone(),
                r.dataset_id.clone(),
                r.spec.kind().to_string(),
                r.spec.params_string(),
                r.spec.level().map(fmt_f64).unwrap_or_default(),
                r.seen.to_string(),
                fmt_f64(r.psnr_db),
                fmt_f64(r.ssim),
            ])
            .map_err(|e| CliError::io("plot", e))?;
        }
        reports.push((label, report));
    }
    let bytes = plot.into_inner().map_err(|e| CliError::io("plot", e))?;
    write_file(&dir.join("plot.csv"), &bytes)?;
    Ok(reports)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(&path.display().to_string(), e))
}

/// Merges row CSVs into one table: one line per (dataset, spec, seen) and a
/// PSNR and SSIM column per input. Returns the CSV text.
pub fn report(inputs: &[(String, PathBuf)]) -> Result<String, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage("report needs at least one rows CSV".into()));
    }
    type Key = (String, String, String, bool);
    let mut order: Vec<Key> = Vec::new();
    let mut cells: BTreeMap<(Key, usize), (f64, f64)> = BTreeMap::new();
    for (i, (_, path)) in inputs.iter().enumerate() {
        let f = File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let rows: Vec<EvalRow> = EvalReport::read_rows_csv(f)?;
        for r in rows {
            let key = (r.dataset_id.clone(), r.spec.kind().to_string(), r.spec.params_string(), r.seen);
            if !order.contains(&key) {
                order.push(key.clone());
            }
            cells.insert((key, i), (r.psnr_db, r.ssim));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["dataset_id", "spec_kind", "spec_params", "seen"].map(String::from).to_vec();
    for (label, _) in inputs {
        header.push(format!("{label}_psnr_db"));
        header.push(format!("{label}_ssim"));
    }
    w.write_record(&header).map_err(|e| CliError::io("report", e))?;
    for key in &order {
        let mut rec = vec![key.0.clone(), key.1.clone(), key.2.clone(), key.3.to_string()];
        for i in 0..inputs.len() {
            match cells.get(&(key.clone(), i)) {
                Some((p, s)) => {
                    rec.push(fmt_f64(*p));
                    rec.push(fmt_f64(*s));
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(|e| CliError::io("report", e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io("report", e))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
