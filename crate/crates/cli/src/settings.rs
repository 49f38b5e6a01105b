//! Layered configuration: built-in variant, then config file, then flags.

use std::fs;
use std::path::Path;

use segformer::config::{parse_key_values, MitConfig};
use segformer::train::TrainSpec;
use segformer::{Error, Result};

/// Model config for a variant name; `B0-micro` (or `micro`) selects the shrunken B0.
pub fn builtin(variant: &str, num_classes: usize) -> Result<MitConfig> {
    match variant.to_ascii_lowercase().as_str() {
        "micro" | "b0-micro" | "b0_micro" => Ok(MitConfig::b0_micro(num_classes)),
        _ => Ok(MitConfig::builtin_named(variant)
            .map_err(|e| match e {
                Error::Config(m) => Error::Usage(m),
                e => e,
            })?
            .with_num_classes(num_classes)),
    }
}

/// A config file split into model keys and `train.`-prefixed keys.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub model: Vec<(String, String)>,
    pub train: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        let mut out = Self::default();
        for (k, v) in parse_key_values(&text)? {
            match k.strip_prefix("train.") {
                Some(t) => out.train.push((t.to_string(), v)),
                None => out.model.push((k, v)),
            }
        }
        Ok(out)
    }

    pub fn sets_model_key(&self, key: &str) -> bool {
        self.model.iter().any(|(k, _)| k == key)
    }

    pub fn apply_model(&self, cfg: &mut MitConfig) -> Result<()> {
        let text: String = self.model.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        cfg.apply_text(&text)
    }

    pub fn apply_train(&self, spec: &mut TrainSpec) -> Result<()> {
        for (k, v) in &self.train {
            spec.set(k, v)?;
        }
        Ok(())
    }
}

/// `key: value` echo of a resolved model config.
pub fn echo_model(cfg: &MitConfig) {
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            println!("config.{}: {}", k.trim(), v.trim());
        }
    }
}

pub fn echo_train(spec: &TrainSpec) {
    for (k, v) in spec.to_pairs() {
        println!("train.{k}: {v}");
    }
}
