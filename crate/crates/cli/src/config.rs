//! Experiment configuration: one JSON document plus command-line overrides.

use std::path::{Path, PathBuf};

use dil_core::degradation::{ConfounderSet, DistortionSpec, HybridLevel};
use dil_core::metrics::Channel;
use dil_core::model::NetConfig;
use dil_core::optim::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Denoise,
    Deblur,
    Hybrid,
}

impl Task {
    pub fn default_train_specs(self) -> Vec<DistortionSpec> {
        match self {
            Task::Denoise => awgn(&[5.0, 10.0, 15.0, 20.0]),
            Task::Deblur => blur(&[1.0, 2.0, 3.0, 4.0]),
            Task::Hybrid => vec![HybridLevel::Severe.spec()],
        }
    }

    pub fn default_test_specs(self) -> Vec<DistortionSpec> {
        match self {
            Task::Denoise => awgn(&[30.0, 40.0, 50.0]),
            Task::Deblur => blur(&[4.2, 4.4, 4.6, 4.8, 5.0]),
            Task::Hybrid => vec![HybridLevel::Mild.spec(), HybridLevel::Moderate.spec()],
        }
    }
}

fn awgn(s: &[f64]) -> Vec<DistortionSpec> {
    s.iter().map(|&sigma| DistortionSpec::Awgn { sigma }).collect()
}

fn blur(s: &[f64]) -> Vec<DistortionSpec> {
    s.iter().map(|&sigma| DistortionSpec::GaussianBlur { sigma }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic images generated on the fly.
    Procedural {
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default = "default_eval_count")]
        eval_count: usize,
        #[serde(default = "default_side")]
        h: usize,
        #[serde(default = "default_side")]
        w: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Every `*.ppm` in each directory, in file-name order.
    Directory { train_dir: PathBuf, eval_dir: PathBuf },
}

fn default_count() -> usize {
    40
}
fn default_eval_count() -> usize {
    10
}
fn default_side() -> usize {
    96
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    pub train_specs: Vec<DistortionSpec>,
    pub test_specs: Vec<DistortionSpec>,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub channel: Channel,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/dil")
}

/// Command-line overrides, applied in this order after the file is read.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for everything, as if loaded from an empty document.
    pub fn defaults() -> Self {
        Self::from_value(Value::Object(Map::new()), &Overrides::default()).expect("defaults are valid")
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        Self::from_value(doc, overrides)
    }

    /// Applies overrides and seed/spec defaults to `doc`, then parses and
    /// validates it.
    pub fn from_value(mut doc: Value, overrides: &Overrides) -> Result<Self, CliError> {
        if !doc.is_object() {
            return Err(CliError::Usage("config must be a JSON object".into()));
        }
        for s in &overrides.sets {
            apply_set(&mut doc, s)?;
        }
        let root = doc.as_object_mut().expect("checked above");
        if let Some(seed) = overrides.seed {
            root.insert("seed".into(), seed.into());
        }
        if let Some(out) = &overrides.out {
            root.insert("output_dir".into(), out.to_string_lossy().into_owned().into());
        }
        let seed = root.get("seed").cloned().unwrap_or(0.into());
        let task: Task = match root.get("task") {
            Some(t) => serde_json::from_value(t.clone()).map_err(|e| CliError::Usage(format!("task: {e}")))?,
            None => Task::default(),
        };
        if !root.contains_key("train_specs") {
            root.insert("train_specs".into(), serde_json::to_value(task.default_train_specs()).expect("specs"));
        }
        if !root.contains_key("test_specs") {
            root.insert("test_specs".into(), serde_json::to_value(task.default_test_specs()).expect("specs"));
        }
        fill_seed(root, "train", &seed, None);
        fill_seed(root, "dataset", &seed, Some("procedural"));

        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        let set = self.train_set()?;
        for s in &self.test_specs {
            s.validate().map_err(CliError::from_config)?;
            if set.specs().contains(s) {
                return usage(format!("test spec {s} also appears in train_specs"));
            }
        }
        self.net.validate().map_err(CliError::from_config)?;
        self.train.validate_for(&set).map_err(CliError::from_config)?;
        if let DatasetConfig::Procedural { count, eval_count, h, w, .. } = &self.dataset {
            if *count == 0 || *eval_count == 0 {
                return usage("procedural dataset needs at least one training and one evaluation image".into());
            }
            if self.train.patch > *h.min(w) {
                return usage(format!("patch {} does not fit {h}x{w} images", self.train.patch));
            }
        }
        Ok(())
    }

    pub fn train_set(&self) -> Result<ConfounderSet, CliError> {
        ConfounderSet::new(self.train_specs.clone()).map_err(CliError::from_config)
    }
}

fn fill_seed(root: &mut Map<String, Value>, key: &str, seed: &Value, only_kind: Option<&str>) {
    let entry = root.entry(key).or_insert_with(|| Value::Object(Map::new()));
    let Some(obj) = entry.as_object_mut() else { return };
    if let Some(kind) = only_kind {
        match obj.get("kind") {
            None => {
                obj.insert("kind".into(), kind.into());
            }
            Some(k) if k == kind => {}
            Some(_) => return,
        }
    }
    obj.entry("seed").or_insert_with(|| seed.clone());
}

/// `a.b.c=value`: the value is read as JSON when it parses, as a plain
/// string otherwise. Missing intermediate objects are created.
pub fn apply_set(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("bad key `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("`{}` is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        node = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("path has at least one key")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(doc: &str, sets: &[&str]) -> Result<ExperimentConfig, CliError> {
        let o = Overrides {
            sets: sets.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        ExperimentConfig::from_value(serde_json::from_str(doc).unwrap(), &o)
    }

    #[test]
    fn empty_document_gets_denoise_defaults() {
        let c = load("{}", &[]).unwrap();
        assert_eq!(c.task, Task::Denoise);
        assert_eq!(c.train_specs, awgn(&[5.0, 10.0, 15.0, 20.0]));
        assert_eq!(c.test_specs, awgn(&[30.0, 40.0, 50.0]));
        assert_eq!(
            c.dataset,
            DatasetConfig::Procedural { count: 40, eval_count: 10, h: 96, w: 96, seed: 0 }
        );
    }

    #[test]
    fn task_picks_its_splits() {
        let c = load(r#"{"task":"deblur"}"#, &[]).unwrap();
        assert_eq!(c.train_specs.len(), 4);
        assert_eq!(c.test_specs.len(), 5);
        let c = load(r#"{"task":"hybrid"}"#, &[]).unwrap();
        assert_eq!(c.train_specs, vec![HybridLevel::Severe.spec()]);
        assert_eq!(c.test_specs.len(), 2);
    }

    #[test]
    fn seed_flows_into_train_and_dataset_unless_given() {
        let o = Overrides { seed: Some(9), ..Default::default() };
        let c = ExperimentConfig::from_value(serde_json::json!({"train": {"seed": 4}}), &o).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.seed, 4);
        assert!(matches!(c.dataset, DatasetConfig::Procedural { seed: 9, .. }));
    }

    #[test]
    fn overlapping_specs_rejected() {
        let e = load(r#"{"test_specs":[{"kind":"awgn","sigma":10.0}]}"#, &[]).unwrap_err();
        assert!(matches!(e, CliError::Usage(_)));
    }

    #[test]
    fn set_overrides_nested_keys() {
        let c = load("{}", &["train.alpha=0.5", "train.variant=dil_sf", "output_dir=/tmp/x"]).unwrap();
        assert_eq!(c.train.alpha, 0.5);
        assert_eq!(c.train.variant.name(), "dil_sf");
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn bad_overrides_rejected() {
        assert!(load("{}", &["noequals"]).is_err());
        assert!(load("{}", &["train..alpha=1"]).is_err());
        assert!(load("{}", &["unknown_key=1"]).is_err());
        assert!(load("{}", &["seed.x=1"]).is_err());
    }

    #[test]
    fn dimension_checks() {
        assert!(load(r#"{"dataset":{"kind":"procedural","h":16}}"#, &[]).is_err());
        assert!(load(r#"{"train":{"variant":"dil_ss","n":3}}"#, &[]).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = load(r#"{"task":"hybrid","seed":3}"#, &[]).unwrap();
        let j = serde_json::to_value(&c).unwrap();
        assert_eq!(ExperimentConfig::from_value(j, &Overrides::default()).unwrap(), c);
    }
}
