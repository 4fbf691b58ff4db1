//! Layered run configuration: built-in defaults, then a JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clearpath::enhance::Variant;
use clearpath::objective::ObjectiveConfig;
use clearpath::task_head::PretrainConfig;
use clearpath::trainer::{AblationConfig, TrainingConfig};
use clearpath::weather::SynthConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::OUT_ROOT_ENV;

/// Name of the resolved configuration inside every output directory.
pub const RESOLVED_CONFIG: &str = "config.json";

/// Recursively overlay `over` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults` overlaid with the optional file, deserialised strictly.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let over: Value = serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        merge(&mut value, over);
    }
    serde_json::from_value(value).map_err(|e| usage(format!("config: {e}")))
}

fn usage(msg: String) -> anyhow::Error {
    clearpath::Error::Config(msg).into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub seed: u64,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRun {
    /// Scenes generated in memory when no data directory is given.
    pub generated_train: usize,
    pub generated_test: usize,
    pub size: usize,
    pub pretrain: PretrainConfig,
}

impl Default for PretrainRun {
    fn default() -> Self {
        Self { generated_train: 1000, generated_test: 200, size: 64, pretrain: PretrainConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub variant: Variant,
    pub stages: usize,
    pub objective: ObjectiveConfig,
    pub training: TrainingConfig,
}

impl TrainRun {
    pub fn defaults(desk: bool) -> Self {
        Self {
            variant: Variant::Layers33,
            stages: 3,
            objective: ObjectiveConfig::default(),
            training: if desk { TrainingConfig::desk() } else { TrainingConfig::default() },
        }
    }
}

pub type AblateRun = AblationConfig;

/// Resolved configuration plus the inputs it was applied to.
#[derive(Serialize)]
pub struct Recorded<'a, T> {
    pub command: &'a str,
    pub version: &'a str,
    pub inputs: Value,
    pub config: &'a T,
}

pub fn record<T: Serialize>(dir: &Path, command: &str, inputs: Value, config: &T) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let rec = Recorded { command, version: env!("CARGO_PKG_VERSION"), inputs, config };
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, serde_json::to_string_pretty(&rec)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Explicit directory, or `$CLEARPATH_OUT/<name>` (default root `runs`).
/// Completed run directories are never reused.
pub fn run_dir(explicit: Option<&Path>, name: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(std::env::var_os(OUT_ROOT_ENV).unwrap_or_else(|| "runs".into())).join(name),
    };
    if dir.join(RESOLVED_CONFIG).exists() {
        bail!("run directory {} already holds a completed run", dir.display());
    }
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn file_values_override_defaults_without_dropping_siblings() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("c.json");
        fs::write(&path, r#"{"training": {"epochs": 3, "milestones": [2]}, "objective": {"alpha": 0.5}}"#).unwrap();
        let run: TrainRun = layered(&TrainRun::defaults(true), Some(&path)).unwrap();
        assert_eq!(run.training.epochs, 3);
        assert_eq!(run.training.batch_size, TrainingConfig::desk().batch_size);
        assert_eq!(run.objective.alpha, 0.5);
        assert_eq!(run.objective.beta_fi, ObjectiveConfig::default().beta_fi);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("c.json");
        fs::write(&path, r#"{"training": {"epoch": 3}}"#).unwrap();
        let err = layered(&TrainRun::defaults(false), Some(&path)).unwrap_err();
        assert!(matches!(err.downcast_ref::<clearpath::Error>(), Some(clearpath::Error::Config(_))));
    }

    #[test]
    fn merge_replaces_arrays_and_scalars() {
        let mut a = json!({"x": [1, 2], "y": {"z": 1, "w": 2}});
        merge(&mut a, json!({"x": [3], "y": {"z": 5}}));
        assert_eq!(a, json!({"x": [3], "y": {"z": 5, "w": 2}}));
    }
}
