//! Declarative run configuration: one TOML document driving generation,
//! analysis, training and evaluation, with `--set section.key=value`
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ScalerScope, SplitOrder, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::MaseMode;
use crate::model::{ModelConfig, PartitionId};
use crate::optim::{HyperParams, ServerAlgo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Pooled baseline without a federation.
    NoFl,
    Fl,
    Plfl,
}

impl Algorithm {
    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::NoFl => "nofl",
            Algorithm::Fl => "fl",
            Algorithm::Plfl => "plfl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub algorithm: Algorithm,
    pub server_algo: ServerAlgo,
    pub partition: PartitionId,
    pub server_epochs: usize,
    pub client_epochs: usize,
    pub client_lr: f64,
    /// Defaults to 1 for fedavg/fedavgm and 0.01 for fedadam when unset.
    pub server_lr: Option<f64>,
    pub server_beta1: f64,
    pub server_beta2: f64,
    pub server_eps: f64,
    pub client_beta1: f64,
    pub client_beta2: f64,
    pub client_eps: f64,
    pub nofl_epochs: usize,
    pub nofl_lr: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let hp = HyperParams::defaults_for(ServerAlgo::FedAdam);
        TrainingSection {
            algorithm: Algorithm::Plfl,
            server_algo: ServerAlgo::FedAdam,
            partition: PartitionId::P1,
            server_epochs: hp.server_epochs,
            client_epochs: hp.client_epochs,
            client_lr: hp.client_lr,
            server_lr: None,
            server_beta1: hp.server_beta1,
            server_beta2: hp.server_beta2,
            server_eps: hp.server_eps,
            client_beta1: hp.client_beta1,
            client_beta2: hp.client_beta2,
            client_eps: hp.client_eps,
            nofl_epochs: 8000,
            nofl_lr: 0.001,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Generate,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// CSV files (each with a JSON sidecar of the same stem) when
    /// `source = "csv"`.
    pub csv_paths: Vec<PathBuf>,
    pub n_clients: usize,
    pub length: usize,
    pub scale_spread: f64,
    pub variance_profile: f64,
    pub noise_level: f64,
    /// Generator seed; defaults to the training seed.
    pub seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        let synth = SynthConfig::default();
        DataSection {
            source: DataSource::Generate,
            csv_paths: Vec::new(),
            n_clients: synth.n_clients,
            length: synth.length,
            scale_spread: synth.scale_spread,
            variance_profile: synth.variance_profile,
            noise_level: synth.noise_level,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Output root; falls back to $FEDCAST_OUT, then ./out.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlagsSection {
    pub resample_per_client_epoch: bool,
    /// Literal split chronology: the middle 10% chunk is the test set.
    pub paper_split_order: bool,
    /// Unnormalized MASE denominator (raw sum of naive errors).
    pub paper_mase_formula: bool,
}

pub const OUTPUT_ENV: &str = "FEDCAST_OUT";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingSection,
    pub data: DataSection,
    pub output: OutputSection,
    pub flags: FlagsSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config {
            field: "config".into(),
            msg: e.to_string(),
        })
    }

    /// Load a config file (or the defaults when `path` is None) and apply
    /// `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config {
                field: "config".into(),
                msg: format!("cannot read {}: {e}", p.display()),
            })?,
            None => String::new(),
        };
        if overrides.is_empty() {
            return Self::from_toml_str(&text);
        }
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config {
            field: "config".into(),
            msg: e.to_string(),
        })?;
        for entry in overrides {
            apply_override(&mut table, entry)?;
        }
        Self::from_toml_str(&toml::to_string(&table).map_err(|e| Error::Config {
            field: "config".into(),
            msg: e.to_string(),
        })?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config {
            field: "model".into(),
            msg: e.to_string(),
        })?;
        self.hyperparams().validate()?;
        match self.training.algorithm {
            Algorithm::Plfl => {
                if self.training.partition == PartitionId::Fl {
                    return Err(Error::Config {
                        field: "training.partition".into(),
                        msg: "plfl needs a partition with personalized layers (P1, P2 or P3)"
                            .into(),
                    });
                }
            }
            Algorithm::NoFl => {
                if self.training.nofl_epochs == 0 || self.training.nofl_lr <= 0.0 {
                    return Err(Error::Config {
                        field: "training.nofl_epochs".into(),
                        msg: "pooled training needs positive epochs and learning rate".into(),
                    });
                }
            }
            Algorithm::Fl => {}
        }
        match self.data.source {
            DataSource::Csv => {
                if self.data.csv_paths.is_empty() {
                    return Err(Error::Config {
                        field: "data.csv_paths".into(),
                        msg: "csv source needs at least one path".into(),
                    });
                }
            }
            DataSource::Generate => self.synth_config().validate()?,
        }
        Ok(())
    }

    pub fn hyperparams(&self) -> HyperParams {
        let t = &self.training;
        HyperParams {
            server_epochs: t.server_epochs,
            client_epochs: t.client_epochs,
            server_lr: t.server_lr.unwrap_or_else(|| t.server_algo.default_lr()),
            client_lr: t.client_lr,
            client_beta1: t.client_beta1,
            client_beta2: t.client_beta2,
            client_eps: t.client_eps,
            server_beta1: t.server_beta1,
            server_beta2: t.server_beta2,
            server_eps: t.server_eps,
            batch_size: self.model.batch_size,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_clients: self.data.n_clients,
            length: self.data.length,
            scale_spread: self.data.scale_spread,
            variance_profile: self.data.variance_profile,
            noise_level: self.data.noise_level,
            seed: self.data.seed.unwrap_or(self.training.seed),
        }
    }

    pub fn split_order(&self) -> SplitOrder {
        if self.flags.paper_split_order {
            SplitOrder::TrainTestVal
        } else {
            SplitOrder::TrainValTest
        }
    }

    pub fn mase_mode(&self) -> MaseMode {
        if self.flags.paper_mase_formula {
            MaseMode::RawSum
        } else {
            MaseMode::Normalized
        }
    }

    /// Pooled training sees one dataset, so it gets one scaler.
    pub fn scaler_scope(&self) -> ScalerScope {
        match self.training.algorithm {
            Algorithm::NoFl => ScalerScope::Global,
            _ => ScalerScope::PerClient,
        }
    }

    pub fn output_dir(&self, cli_override: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_override {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output.dir {
            return p.clone();
        }
        if let Ok(p) = std::env::var(OUTPUT_ENV) {
            return PathBuf::from(p);
        }
        PathBuf::from("out")
    }
}

/// Apply one `section.key=value` override to a parsed TOML table. The value
/// is parsed as TOML; anything that does not parse becomes a string.
fn apply_override(table: &mut toml::Table, entry: &str) -> Result<()> {
    let (path, raw_value) = entry.split_once('=').ok_or_else(|| Error::Config {
        field: entry.into(),
        msg: "override must look like section.key=value".into(),
    })?;
    let value = parse_toml_value(raw_value.trim());

    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config {
            field: entry.into(),
            msg: "empty key segment".into(),
        });
    }
    let mut current = table;
    for seg in &segments[..segments.len() - 1] {
        current = current
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config {
                field: path.into(),
                msg: format!("`{seg}` is not a table"),
            })?;
    }
    current.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v exists"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
