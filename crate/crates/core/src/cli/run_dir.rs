//! File names inside output directories, and the manifest every command
//! writes before doing any work.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use itportrait::backends::Backends;
use itportrait::config::{BackendSelection, Config};
use itportrait::image::Image;
use itportrait::inversion::PoseInit;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const STYLE: &str = "style.png";
pub const LATENT: &str = "latent.itpc";
pub const POSE: &str = "pose.itpc";
pub const INVERSION_LOG: &str = "inversion_loss.jsonl";
pub const RECONSTRUCTION: &str = "reconstruction.png";
pub const METRICS: &str = "metrics.json";
pub const INVERSION_DIR: &str = "inversion";
pub const APT_LOG: &str = "apt_loss.jsonl";
pub const FUSION_LOG: &str = "fusion_state.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";
pub const SUMMARY: &str = "summary.json";
pub const GRID: &str = "grid.png";
pub const EVAL_REPORT: &str = "eval_report.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seeds {
    pub backend: Option<u64>,
    pub inversion: u64,
    pub train: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub backend: BackendSelection,
    pub seeds: Seeds,
    pub config: Config,
    /// Filled in by `invert` once the starting pose is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_init: Option<PoseInit>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, out_dir: &Path, config: &Config) -> Self {
        let backend_seed = match &config.backend {
            BackendSelection::Toy { seed, .. } => Some(*seed),
            BackendSelection::Adapter { .. } => None,
        };
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_path: config_path.map(Path::to_path_buf),
            out_dir: out_dir.to_path_buf(),
            backend: config.backend.clone(),
            seeds: Seeds {
                backend: backend_seed,
                inversion: config.inversion.seed,
                train: config.train.seed,
            },
            config: config.clone(),
            pose_init: None,
        }
    }

    /// Writes the manifest and the config snapshot.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join(MANIFEST), self)?;
        let snap = dir.join(CONFIG_SNAPSHOT);
        fs::write(&snap, self.config.to_toml())
            .with_context(|| format!("writing {}", snap.display()))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for r in records {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        f.write_all(&line)
            .with_context(|| format!("appending to {}", path.display()))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:06}")
}

/// Newest checkpoint under `run_dir/checkpoints`, by epoch number.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join(CHECKPOINTS);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch-"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Loads a PNG and brings it to the backend's render size.
pub fn load_style(path: &Path, backends: &Backends) -> Result<Image> {
    let img =
        Image::load_png(path).with_context(|| format!("loading style image {}", path.display()))?;
    let (h, w) = backends.generator.resolution();
    if img.height() != h || img.width() != w {
        log::warn!(
            "style image is {}x{}, resampling to the backend's {h}x{w}",
            img.height(),
            img.width()
        );
        return Ok(img.resize_nearest(h, w));
    }
    Ok(img)
}
