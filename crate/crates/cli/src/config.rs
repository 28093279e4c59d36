use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use pgc::model::ModelConfig;
use pgc::train::{SyntheticTask, TrainConfig};

use crate::CliError;

/// Settings for one invocation: config file values overlaid by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub subcommand: String,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Corpus the category vocabulary is built from; defaults to `input`.
    pub train_input: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tighten: bool,
    pub multi_ref: bool,
    /// Seeds model initialization, batch order and synthetic data.
    pub seed: u64,
    pub top_k_categories: usize,
    pub vocab_max: usize,
    pub vocab_min_count: usize,
    pub synthetic_task: SyntheticTask,
    pub synthetic_examples: usize,
    pub synthetic_oov_rate: f64,
    pub layer: Option<usize>,
    pub heads: Option<Vec<usize>>,
    pub example_index: usize,
    /// Coordinates probed per parameter by `gradcheck`; 0 probes all.
    pub gradcheck_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            subcommand: String::new(),
            input: None,
            output: None,
            train_input: None,
            checkpoint: None,
            predictions: None,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            tighten: false,
            multi_ref: false,
            seed: 0,
            top_k_categories: 10,
            vocab_max: 512,
            vocab_min_count: 2,
            synthetic_task: SyntheticTask::CopyTask,
            synthetic_examples: 2000,
            synthetic_oov_rate: 0.15,
            layer: None,
            heads: None,
            example_index: 0,
            gradcheck_samples: 16,
        }
    }
}

fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(given), Value::Object(known)) = (given, known) else {
        return;
    };
    for (key, value) in given {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match known.get(key) {
            None => out.push(path),
            Some(k) => unknown_keys(value, k, &path, out),
        }
    }
}

/// Reads a JSON config file. An empty file yields the defaults.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|m| CliError::Usage(format!("config {}: {m}", path.display())))
}

pub fn parse_config(text: &str) -> Result<RunConfig, String> {
    if text.trim().is_empty() {
        return Ok(RunConfig::default());
    }
    let value: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    if !value.is_object() {
        return Err("top level must be a JSON object".into());
    }
    let known = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut unknown = Vec::new();
    unknown_keys(&value, &known, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(format!("unknown keys: {}", unknown.join(", ")));
    }
    let mut merged = known;
    merge(&mut merged, value);
    serde_json::from_value(merged).map_err(|e| e.to_string())
}

/// Overlays `patch` onto `base`, recursing into objects so a partial nested
/// section keeps its other defaults.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Path of the config echo written next to an output artifact.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    output.with_file_name(name)
}

pub fn write_sidecar(config: &RunConfig, output: &Path) -> Result<(), CliError> {
    let path = sidecar_path(output);
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    std::fs::write(&path, json + "\n")
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}
