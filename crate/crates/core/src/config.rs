//! The run configuration file.
//!
//! A single TOML document with one table per subsystem. Every key has a
//! default, unknown keys are rejected, and any key can be overridden with a
//! dotted path such as `train.consistency_enabled=false`. The resolved
//! configuration is written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{AugmentationConfig, SplitSpec};
use crate::decoders::{ModelConfig, NetworkConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{Aggregation, EvalConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus directory holding `images/` and `masks/`.
    pub root: PathBuf,
    /// Label used for report rows.
    pub name: String,
    /// Treat unmatched images or masks as fatal.
    pub strict: bool,
    pub split: SplitSpec,
    pub augmentation: AugmentationConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            name: "dataset".into(),
            strict: false,
            split: SplitSpec::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub threshold: f64,
    pub batch_size: usize,
    /// Aggregation used for the paired ablation report.
    pub aggregation: Aggregation,
}

impl Default for ReportConfig {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            threshold: e.threshold,
            batch_size: e.batch_size,
            aggregation: Aggregation::Mean,
        }
    }
}

impl ReportConfig {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            threshold: self.threshold,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            backbone: BackboneConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: ReportConfig::default(),
        }
    }
}

/// Parse the right-hand side of an override as a TOML value, falling back to
/// a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{path}`")));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut table = root;
    for k in parents {
        table = match table.get_mut(*k) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown configuration section `{k}` in `{path}`"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Apply `key.path=value` overrides in order. Values are read as TOML
    /// literals; anything that does not parse is taken as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut cfg = self.clone();
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            let key = key.trim().trim_start_matches("--");
            let raw = raw.trim();
            let attempt = |value: toml::Value| -> Result<RunConfig> {
                let mut table = toml::Table::try_from(&cfg)
                    .map_err(|e| Error::Config(format!("cannot encode configuration: {e}")))?;
                set_path(&mut table, key, value)?;
                toml::Value::Table(table)
                    .try_into::<RunConfig>()
                    .map_err(|e| Error::Config(format!("override `{o}`: {e}")))
            };
            cfg = match attempt(parse_literal(raw)) {
                Ok(c) => c,
                Err(first) => attempt(toml::Value::String(raw.to_string())).map_err(|_| first)?,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split.validate()?;
        self.data.augmentation.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.eval_config().validate()?;
        if self.model.se_reduction == 0 {
            return Err(Error::Config("model.se_reduction must be at least 1".into()));
        }
        Ok(())
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            backbone: self.backbone.clone(),
            model: self.model.clone(),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot encode configuration: {e}")))
    }

    /// The resolved configuration, prefixed with the crate version.
    pub fn echo(&self) -> Result<String> {
        Ok(format!(
            "# resolved configuration, plutonet {}\n{}",
            env!("CARGO_PKG_VERSION"),
            self.to_toml_string()?
        ))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.echo()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
