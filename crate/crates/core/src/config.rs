//! Run configuration: one TOML file, dotted-key overrides, and a resolved
//! snapshot that is written next to every run.
//!
//! ```toml
//! [backend]
//! kind = "toy"          # or "adapter" with `manifest = "path.toml"`
//! seed = 0
//! resolution = 64
//!
//! [inversion]           # alpha, perturb_range_2d, steps, step_size, ...
//! [stylize]             # beta, perturb_range_3d, batch_size, loss
//! [fusion]              # tau, xi, target_text, source_text, views, ...
//! [train]               # epochs, step_size, cadence, trainable, seed, ...
//! [pti]                 # steps, step_size, loss, trainable
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::adapter::AdapterManifest;
use crate::backends::toy::ToyBackendConfig;
use crate::backends::Backends;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::inversion::InversionConfig;
use crate::stylizer::StylizeConfig;
use crate::trainer::{Cadence, PtiConfig, TrainConfig};

/// Environment variable naming the default backend: `toy`, or a path to
/// an adapter manifest.
pub const BACKEND_ENV: &str = "ITPORTRAIT_BACKEND";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSelection {
    Toy {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_resolution")]
        resolution: usize,
    },
    Adapter {
        manifest: PathBuf,
    },
}

fn default_resolution() -> usize {
    ToyBackendConfig::default().resolution
}

impl Default for BackendSelection {
    fn default() -> Self {
        match std::env::var(BACKEND_ENV) {
            Ok(v) if !v.is_empty() && v != "toy" => {
                BackendSelection::Adapter { manifest: v.into() }
            }
            _ => BackendSelection::Toy {
                seed: 0,
                resolution: default_resolution(),
            },
        }
    }
}

impl BackendSelection {
    pub fn build(&self) -> Result<Backends> {
        match self {
            BackendSelection::Toy { seed, resolution } => ToyBackendConfig {
                seed: *seed,
                resolution: *resolution,
            }
            .build(),
            BackendSelection::Adapter { manifest } => {
                let m = AdapterManifest::load(manifest)?;
                m.validate()?;
                Err(Error::Unavailable(format!(
                    "manifest {} is valid, but this build has no compute runtime for pretrained generators",
                    manifest.display()
                )))
            }
        }
    }
}

/// Scalar training settings; the stage configs live in their own tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub step_size: f64,
    pub cadence: Cadence,
    pub trainable: Vec<String>,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            step_size: t.step_size,
            cadence: t.cadence,
            trainable: t.trainable,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: BackendSelection,
    pub inversion: InversionConfig,
    pub stylize: StylizeConfig,
    pub fusion: FusionConfig,
    pub train: TrainSection,
    pub pti: PtiConfig,
}

impl Config {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            step_size: self.train.step_size,
            cadence: self.train.cadence,
            trainable: self.train.trainable.clone(),
            seed: self.train.seed,
            checkpoint_every: self.train.checkpoint_every,
            stylize: self.stylize.clone(),
            fusion: self.fusion.clone(),
        }
    }

    /// Checks every section against a generator with `layers` latent layers.
    pub fn validate(&self, layers: usize) -> Result<()> {
        self.inversion.validate()?;
        self.train_config().validate(layers)?;
        self.pti.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text` after applying `key.path=value` overrides. Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Config::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} must look like key.path=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry((*p).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert((*last).to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
