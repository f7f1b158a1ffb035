//! Run configuration: a flat `key = value` file with section headers
//! ([data], [model], [train], [output]), plus `--set section.key=value`
//! overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swinchex_core::config::ModelConfig;
use swinchex_core::train::TrainOptions;
use swinchex_core::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the PNG images.
    pub images_dir: PathBuf,
    /// Label CSV in the ingestion schema.
    pub labels_csv: PathBuf,
    /// Where the split manifest lives (written by `split`, read by `train`).
    pub manifest: PathBuf,
    /// Optional official split lists, one filename per line; when both are
    /// set, `split` uses them instead of the seeded patient shuffle.
    pub train_list: Option<PathBuf>,
    pub val_list: Option<PathBuf>,
    pub seed: u64,
    pub train_frac: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parse the config file, apply `--set` overrides, and validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        Self::from_str_with_overrides(&text, overrides, &path.display().to_string())
    }

    pub fn from_str_with_overrides(
        text: &str,
        overrides: &[String],
        origin: &str,
    ) -> Result<RunConfig> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("parse {origin}: {e}")))?;
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config {origin}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(0.0 < self.data.train_frac && self.data.train_frac < 1.0) {
            return Err(Error::Config(format!(
                "data.train_frac = {} must lie strictly between 0 and 1",
                self.data.train_frac
            )));
        }
        if self.train.lr < 0.0 {
            return Err(Error::Config(format!(
                "train.lr = {} must not be negative",
                self.train.lr
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }
}

/// Apply one `section.key=value` override. The value is parsed as a TOML
/// literal (so numbers, booleans and arrays work) and falls back to a bare
/// string.
fn apply_override(root: &mut toml::Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} must look like section.key=value")))?;
    let (path, raw) = (path.trim(), raw.trim());
    // parse the value as a TOML literal (numbers, booleans, arrays, quoted
    // strings); bare words fall back to plain strings
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(doc) => doc
            .get("v")
            .cloned()
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {item:?} has an empty key segment")));
    }
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {part:?} is not a table")))?
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {path:?} does not address a table")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
