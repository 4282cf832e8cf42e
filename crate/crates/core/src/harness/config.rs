use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attribution::{MethodId, MethodParams};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::{NetworkConfig, TrainConfig};
use crate::synth::GeneratorParams;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ECGATTR_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_per_class: usize,
    pub generator: GeneratorParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Name of the preset these settings started from.
    pub preset: String,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub method_params: MethodParams,
    pub eval: EvalConfig,
    pub methods: Vec<MethodId>,
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Overlay plots written per method and repeat.
    pub plots_per_method: usize,
}

/// Default output root: `$ECGATTR_OUT` or `./ecgattr-out`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("ecgattr-out"))
}

impl RunConfig {
    /// Full-scale settings: 2000 examples per class, 18-layer network, 50 epochs, 5 repeats.
    pub fn paper(seed: u64) -> Self {
        RunConfig {
            preset: "paper".into(),
            dataset: DatasetConfig { n_per_class: 2000, generator: GeneratorParams::default() },
            network: NetworkConfig::paper(),
            train: TrainConfig { seed, ..TrainConfig::default() },
            method_params: MethodParams { seed, ..MethodParams::default() },
            eval: EvalConfig { seed, ..EvalConfig::default() },
            methods: MethodId::ALL.to_vec(),
            out_dir: default_out_root().join("paper"),
            workers: 1,
            plots_per_method: 1,
        }
    }

    /// Small settings for a single-machine run in minutes.
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            preset: "desk".into(),
            dataset: DatasetConfig { n_per_class: 600, generator: GeneratorParams::default() },
            network: NetworkConfig::desk(),
            train: TrainConfig { learning_rate: 1e-3, batch_size: 32, epochs: 6, seed, ..TrainConfig::default() },
            method_params: MethodParams { samples: 256, seed, ..MethodParams::default() },
            eval: EvalConfig { repeats: 3, seed, max_examples: Some(64), ..EvalConfig::default() },
            methods: MethodId::ALL.to_vec(),
            out_dir: default_out_root().join("desk"),
            workers: 1,
            plots_per_method: 1,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(seed)),
            "paper" => Ok(Self::paper(seed)),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `desk` or `paper`)"))),
        }
    }

    /// Layers a partial JSON document over `self`: objects merge key by key,
    /// everything else replaces.
    pub fn merged_with(&self, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge_json(&mut base, overrides);
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON run config. Its `preset` key (default `desk`) selects the
    /// base settings the remaining keys override.
    pub fn from_json_file(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let preset = value.get("preset").and_then(Value::as_str).unwrap_or("desk");
        let mut base = Self::preset(preset, 0)?;
        if let Some(seed) = seed {
            base.set_seed(seed);
        }
        base.merged_with(&value)
    }

    /// Uses `seed` for training, methods and repeat derivation.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.method_params.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if self.dataset.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        if self.network.input_length != self.dataset.generator.signal_length {
            return Err(Error::Config(format!(
                "network input length {} differs from signal length {}",
                self.network.input_length, self.dataset.generator.signal_length
            )));
        }
        self.dataset.generator.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.method_params.validate(self.network.input_length)?;
        self.eval.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.methods.iter().find(|m| !seen.insert(**m)) {
            return Err(Error::Config(format!("method {dup} listed twice")));
        }
        Ok(())
    }
}

pub fn merge_json(base: &mut Value, overrides: &Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk(1).validate().unwrap();
        RunConfig::paper(1).validate().unwrap();
        assert!(RunConfig::preset("huge", 0).is_err());
    }

    #[test]
    fn partial_override_keeps_other_fields() {
        let base = RunConfig::desk(3);
        let cfg = base.merged_with(&serde_json::json!({"train": {"epochs": 2}, "methods": ["Random"]})).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, base.train.batch_size);
        assert_eq!(cfg.methods, vec![MethodId::Random]);
        assert!(base.merged_with(&serde_json::json!({"workers": 0})).is_err());
        assert!(base.merged_with(&serde_json::json!({"methods": ["Occlusion"]})).is_err());
    }
}
