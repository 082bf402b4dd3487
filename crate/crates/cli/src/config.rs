//! Run configuration: one JSON document covering every command.
//!
//! Loading is two-pass. The raw JSON is first compared key by key with the
//! serialized defaults so that every unknown key is reported at once, then
//! deserialized for real.

use std::fs;
use std::path::{Path, PathBuf};

use flowalign::ablation::AblationConfig;
use flowalign::data::GenConfig;
use flowalign::model::ModelConfig;
use flowalign::train::TrainConfig;
use flowalign::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    /// Input shape as `[n, c, h, w]`.
    pub shape: [usize; 4],
    pub runs: usize,
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            shape: [1, 3, 64, 64],
            runs: 20,
            warmup: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizOptions {
    /// Anchor spacing of arrow plots, in image pixels.
    pub arrow_stride: usize,
    pub arrow_scale: f64,
    /// Flow modules to render; empty renders all of them.
    pub levels: Vec<String>,
}

impl Default for VizOptions {
    fn default() -> Self {
        VizOptions {
            arrow_stride: 4,
            arrow_scale: 2.0,
            levels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub ablation: AblationConfig,
    pub bench: BenchOptions,
    pub viz: VizOptions,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            gen: GenConfig::default(),
            ablation: AblationConfig::default(),
            bench: BenchOptions::default(),
            viz: VizOptions::default(),
            data: None,
            out: None,
        }
    }
}

/// Dotted paths of keys in `value` that `reference` does not have.
pub fn unknown_keys(value: &Value, reference: &Value) -> Vec<String> {
    fn walk(v: &Value, r: &Value, prefix: &str, out: &mut Vec<String>) {
        let (Value::Object(vm), Value::Object(rm)) = (v, r) else {
            return;
        };
        for (k, child) in vm {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match rm.get(k) {
                Some(rc) => walk(child, rc, &path, out),
                None => out.push(path),
            }
        }
    }
    let mut out = Vec::new();
    walk(value, reference, "", &mut out);
    out
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<RunConfig> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let reference = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        let unknown = unknown_keys(&value, &reference);
        if !unknown.is_empty() {
            return Err(Error::Config(
                unknown.into_iter().map(|k| format!("unknown key {k}")).collect(),
            ));
        }
        serde_json::from_value(value).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        RunConfig::from_json(&text, path)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// Every validation problem across all sections.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.model.validate();
        errs.extend(self.train.validate());
        errs.extend(self.gen.validate());
        errs.extend(self.ablation.validate());
        if self.bench.runs < 3 {
            errs.push(format!("bench.runs must be at least 3 (got {})", self.bench.runs));
        }
        if self.viz.arrow_stride == 0 {
            errs.push("viz.arrow_stride must be at least 1".into());
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Write the effective config into `dir`.
    pub fn save_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::Io { path, source: e })
    }
}
