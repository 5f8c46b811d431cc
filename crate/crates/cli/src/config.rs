//! Run configuration: one JSON document covering environment, networks,
//! training, paths, and evaluation settings, overridable from the command
//! line via dotted keys (`--set env.m=6`).

use glimpse_core::env::EnvConfig;
use glimpse_core::policies::NetworkConfig;
use glimpse_core::trainer::TrainConfig;
use glimpse_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub net: NetworkConfig,
    pub train: TrainConfig,
    /// Directory holding the IDX files; falls back to $GLIMPSE_DATA_DIR,
    /// then ./data/mnist.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Class-balanced subset sizes; null means the full split.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// Stochastic evaluation repetitions for confidence intervals.
    pub eval_runs: usize,
    /// Rollout worker threads; null means all available cores.
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig {
                n: 28,
                c: 1,
                m: 6,
                step: 2,
                episodes: 4,
                horizon: 5,
            },
            net: NetworkConfig::default(),
            train: TrainConfig::default(),
            data_dir: None,
            out_dir: PathBuf::from("out"),
            train_per_class: None,
            test_per_class: None,
            eval_runs: 20,
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.eval_runs == 0 {
            return Err(Error::Config("eval_runs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolve_data_dir(&self) -> PathBuf {
        if let Some(dir) = &self.data_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var("GLIMPSE_DATA_DIR") {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("data/mnist")
    }
}

/// Loads the JSON config (or defaults), then applies dotted-key overrides
/// and the direct flag overrides, validating the final document.
pub fn load_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
    workers: Option<usize>,
) -> Result<RunConfig> {
    let value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", p.display())))?
        }
        None => serde_json::to_value(RunConfig::default()).expect("default serializes"),
    };
    finalize(value, sets, seed, out, workers)
}

/// Like [`load_config`] but starting from an explicit base document instead
/// of a file (used by commands with their own defaults).
pub fn load_config_with_base(
    base: &RunConfig,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
    workers: Option<usize>,
) -> Result<RunConfig> {
    let value = serde_json::to_value(base)
        .map_err(|e| Error::Config(format!("internal config serialization: {e}")))?;
    finalize(value, sets, seed, out, workers)
}

fn finalize(
    mut value: serde_json::Value,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
    workers: Option<usize>,
) -> Result<RunConfig> {
    for assignment in sets {
        apply_set(&mut value, assignment)?;
    }
    let mut config: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("config schema violation: {e}")))?;
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    if let Some(out) = out {
        config.out_dir = out.to_path_buf();
    }
    if let Some(workers) = workers {
        config.workers = Some(workers);
    }
    config.validate()?;
    Ok(config)
}

/// `--set a.b.c=VALUE` where VALUE parses as JSON when possible and falls
/// back to a plain string.
fn apply_set(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set needs key=value, got {assignment:?}")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            Error::Usage(format!("--set path {path:?} does not address an object field"))
        })?;
        if i + 1 == segments.len() {
            map.insert(segment.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}
