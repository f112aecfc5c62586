//! Run checkpoints.
//!
//! A checkpoint is a directory holding `state.json` (scalars, histories,
//! random stream positions) and `tensors.bin` (every f64 vector, bit exact).
//! `tensors.bin` layout, little-endian:
//!
//! * magic `ITCK`, u32 version, u32 entry count
//! * per entry: u32 name length, UTF-8 name, u64 value count, f64 values
//!
//! `state.json` records the SHA-256 of `tensors.bin`, so a truncated or
//! edited checkpoint is refused instead of half-loaded.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AptRecord, RunRngs, RunState, TrainInputs};
use crate::backends::{ParamSet, Submodule};
use crate::error::{Error, Result};
use crate::fusion::FusionState;
use crate::image::Image;
use crate::latent::LatentCode;
use crate::optim::{Adam, OptimizerKind, ParamOptimizer};
use crate::pose::CameraPose;
use crate::rng::{RngState, SeededRng};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ITCK";
const STATE_FILE: &str = "state.json";
const TENSOR_FILE: &str = "tensors.bin";

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    kind: OptimizerKind,
    lr: f64,
    adam: BTreeMap<Submodule, AdamMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngMeta {
    apt: RngState,
    views: RngState,
    gate: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    version: u32,
    epoch: usize,
    tensors_sha256: String,
    image_shape: [usize; 3],
    latent_shape: [usize; 2],
    pose: Vec<f64>,
    rngs: RngMeta,
    apt_optimizer: OptimizerMeta,
    ite_optimizer: OptimizerMeta,
    apt_history: Vec<AptRecord>,
    fusion_history: Vec<FusionState>,
}

fn optimizer_meta(
    opt: &ParamOptimizer,
    prefix: &str,
    tensors: &mut Vec<(String, Vec<f64>)>,
) -> OptimizerMeta {
    let mut adam = BTreeMap::new();
    for (m, a) in &opt.adam {
        tensors.push((format!("{prefix}/{m}/m"), a.m.clone()));
        tensors.push((format!("{prefix}/{m}/v"), a.v.clone()));
        adam.insert(
            *m,
            AdamMeta {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                t: a.t,
            },
        );
    }
    OptimizerMeta {
        kind: opt.kind,
        lr: opt.lr,
        adam,
    }
}

fn push_params(p: &ParamSet, prefix: &str, tensors: &mut Vec<(String, Vec<f64>)>) {
    for m in Submodule::ALL {
        tensors.push((format!("{prefix}/{m}"), p.get(m).to_vec()));
    }
}

fn encode_tensors(tensors: &[(String, Vec<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, values) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::incompatible(self.origin, "tensor file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_tensors(bytes: &[u8], origin: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::incompatible(origin, "missing checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::incompatible(
            origin,
            format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::incompatible(origin, "tensor name is not UTF-8"))?;
        let len = r.u64()? as usize;
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::incompatible(origin, "tensor too large"))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, values);
    }
    if r.pos != bytes.len() {
        return Err(Error::incompatible(origin, "trailing bytes after tensors"));
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `state` into directory `dir`. The directory appears complete or
/// not at all: everything is staged in a sibling and renamed into place.
pub fn save_checkpoint(dir: &Path, state: &RunState) -> Result<()> {
    let mut tensors = Vec::new();
    push_params(&state.g_s, "g_s", &mut tensors);
    push_params(&state.g_t, "g_t", &mut tensors);
    let apt_optimizer = optimizer_meta(&state.apt_optimizer, "apt", &mut tensors);
    let ite_optimizer = optimizer_meta(&state.ite_optimizer, "ite", &mut tensors);
    let inputs = &state.inputs;
    tensors.push(("style_image".into(), inputs.style_image.data().to_vec()));
    tensors.push(("w3d".into(), inputs.w3d.values().to_vec()));
    let blob = encode_tensors(&tensors);
    let (h, w, c) = inputs.style_image.shape();
    let meta = StateMeta {
        version: CHECKPOINT_VERSION,
        epoch: state.epoch,
        tensors_sha256: hex::encode(Sha256::digest(&blob)),
        image_shape: [h, w, c],
        latent_shape: [inputs.w3d.layers(), inputs.w3d.width()],
        pose: inputs.pose.components().to_vec(),
        rngs: RngMeta {
            apt: state.rngs.apt.state(),
            views: state.rngs.views.state(),
            gate: state.rngs.gate.state(),
        },
        apt_optimizer,
        ite_optimizer,
        apt_history: state.apt_history.clone(),
        fusion_history: state.fusion_history.clone(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("checkpoint metadata serializes");

    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("checkpoint path {} has no name", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    let parent = if parent.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        parent
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
    write_file(&staging.join(TENSOR_FILE), &blob)?;
    write_file(&staging.join(STATE_FILE), &json)?;
    if dir.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn take_tensor(
    tensors: &mut BTreeMap<String, Vec<f64>>,
    name: &str,
    origin: &Path,
) -> Result<Vec<f64>> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::incompatible(origin, format!("tensor {name} is missing")))
}

fn take_params(
    tensors: &mut BTreeMap<String, Vec<f64>>,
    prefix: &str,
    origin: &Path,
) -> Result<ParamSet> {
    let mut get = |m: Submodule| take_tensor(tensors, &format!("{prefix}/{m}"), origin);
    Ok(ParamSet::new(
        get(Submodule::Synthesis)?,
        get(Submodule::Mapping)?,
        get(Submodule::Superresolution)?,
        get(Submodule::Decoder)?,
    ))
}

fn restore_optimizer(
    meta: OptimizerMeta,
    prefix: &str,
    tensors: &mut BTreeMap<String, Vec<f64>>,
    origin: &Path,
) -> Result<ParamOptimizer> {
    let mut opt = ParamOptimizer::new(meta.kind, meta.lr);
    for (m, a) in meta.adam {
        let mv = take_tensor(tensors, &format!("{prefix}/{m}/m"), origin)?;
        let vv = take_tensor(tensors, &format!("{prefix}/{m}/v"), origin)?;
        if mv.len() != vv.len() {
            return Err(Error::incompatible(
                origin,
                format!("{prefix}/{m} moments differ in length"),
            ));
        }
        let mut adam = Adam::new(a.lr, 0);
        adam.beta1 = a.beta1;
        adam.beta2 = a.beta2;
        adam.eps = a.eps;
        adam.t = a.t;
        adam.m = mv;
        adam.v = vv;
        opt.adam.insert(m, adam);
    }
    Ok(opt)
}

fn restore_rng(state: &RngState, origin: &Path) -> Result<SeededRng> {
    SeededRng::from_state(state)
        .ok_or_else(|| Error::incompatible(origin, "unreadable random stream position"))
}

pub fn load_checkpoint(dir: &Path) -> Result<RunState> {
    let state_path = dir.join(STATE_FILE);
    let tensor_path = dir.join(TENSOR_FILE);
    let json = fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let meta: StateMeta = serde_json::from_slice(&json)
        .map_err(|e| Error::incompatible(&state_path, format!("unreadable metadata: {e}")))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::incompatible(
            &state_path,
            format!(
                "checkpoint version {}, this build reads {CHECKPOINT_VERSION}",
                meta.version
            ),
        ));
    }
    let blob = fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    if hex::encode(Sha256::digest(&blob)) != meta.tensors_sha256 {
        return Err(Error::incompatible(&tensor_path, "checksum mismatch"));
    }
    let mut tensors = decode_tensors(&blob, &tensor_path)?;
    let g_s = take_params(&mut tensors, "g_s", &tensor_path)?;
    let g_t = take_params(&mut tensors, "g_t", &tensor_path)?;
    let apt_optimizer = restore_optimizer(meta.apt_optimizer, "apt", &mut tensors, &tensor_path)?;
    let ite_optimizer = restore_optimizer(meta.ite_optimizer, "ite", &mut tensors, &tensor_path)?;
    let [h, w, c] = meta.image_shape;
    let style_image = Image::new(
        h,
        w,
        c,
        take_tensor(&mut tensors, "style_image", &tensor_path)?,
    )
    .map_err(|e| Error::incompatible(&tensor_path, e.to_string()))?;
    let [layers, width] = meta.latent_shape;
    let w3d = LatentCode::new(
        layers,
        width,
        take_tensor(&mut tensors, "w3d", &tensor_path)?,
    )
    .map_err(|e| Error::incompatible(&tensor_path, e.to_string()))?;
    let pose = CameraPose::from_components(&meta.pose)
        .map_err(|e| Error::incompatible(&state_path, e.to_string()))?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::incompatible(
            &tensor_path,
            format!("unexpected tensor {extra}"),
        ));
    }
    Ok(RunState {
        epoch: meta.epoch,
        g_s,
        g_t,
        apt_optimizer,
        ite_optimizer,
        rngs: RunRngs {
            apt: restore_rng(&meta.rngs.apt, &state_path)?,
            views: restore_rng(&meta.rngs.views, &state_path)?,
            gate: restore_rng(&meta.rngs.gate, &state_path)?,
        },
        apt_history: meta.apt_history,
        fusion_history: meta.fusion_history,
        inputs: TrainInputs {
            style_image,
            w3d,
            pose,
        },
    })
}
