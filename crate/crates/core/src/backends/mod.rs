//! Interfaces for the pretrained components the pipeline drives, plus
//! parameter bookkeeping shared by every backend.
//!
//! A backend supplies a 3D-aware generator, a 2D style generator with its
//! encoder, a pose estimator, a joint image-text embedder and a perceptual
//! oracle. The [`toy`] module implements all of them deterministically at
//! desk scale; [`adapter`] describes how real checkpoints map onto the same
//! submodule layout.

pub mod adapter;
pub mod toy;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentCode;
use crate::pose::CameraPose;
use crate::rng::SeededRng;

/// Named parameter groups of a 3D generator, in network order
/// (synthesis is the first module, decoder the fourth).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodule {
    Synthesis,
    Mapping,
    Superresolution,
    Decoder,
}

impl Submodule {
    pub const ALL: [Submodule; 4] = [
        Submodule::Synthesis,
        Submodule::Mapping,
        Submodule::Superresolution,
        Submodule::Decoder,
    ];

    pub fn index(self) -> usize {
        match self {
            Submodule::Synthesis => 0,
            Submodule::Mapping => 1,
            Submodule::Superresolution => 2,
            Submodule::Decoder => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Submodule::Synthesis => "synthesis",
            Submodule::Mapping => "mapping",
            Submodule::Superresolution => "superresolution",
            Submodule::Decoder => "decoder",
        }
    }
}

impl fmt::Display for Submodule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Submodule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Submodule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown submodule {s:?}; expected one of synthesis, mapping, superresolution, decoder"
                ))
            })
    }
}

/// Flat parameter storage, one vector per submodule.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: [Vec<f64>; 4],
}

impl ParamSet {
    pub fn new(
        synthesis: Vec<f64>,
        mapping: Vec<f64>,
        superresolution: Vec<f64>,
        decoder: Vec<f64>,
    ) -> Self {
        Self {
            tensors: [synthesis, mapping, superresolution, decoder],
        }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            tensors: std::array::from_fn(|i| vec![0.0; other.tensors[i].len()]),
        }
    }

    pub fn get(&self, m: Submodule) -> &[f64] {
        &self.tensors[m.index()]
    }

    pub fn get_mut(&mut self, m: Submodule) -> &mut Vec<f64> {
        &mut self.tensors[m.index()]
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .all(|(a, b)| a.len() == b.len())
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    /// Frobenius norm of `self - other` over every submodule.
    pub fn distance(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.iter().zip(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over the little-endian bytes of one submodule.
    pub fn submodule_hash(&self, m: Submodule) -> String {
        hash_f64(self.get(m))
    }

    /// SHA-256 over every submodule in network order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update((t.len() as u64).to_le_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn hash_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Set of submodules exposed to an optimizer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamView {
    pub(crate) selected: BTreeSet<Submodule>,
}

impl ParamView {
    pub fn contains(&self, m: Submodule) -> bool {
        self.selected.contains(&m)
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Submodule> + '_ {
        self.selected.iter().copied()
    }

    /// Count of trainable scalars this view exposes on `params`.
    pub fn parameter_count(&self, params: &ParamSet) -> usize {
        self.iter().map(|m| params.get(m).len()).sum()
    }
}

/// Restricts training to the named submodules of `g`.
pub fn select_submodule_params<S: AsRef<str>>(
    g: &dyn Generator3D,
    names: &[S],
) -> Result<ParamView> {
    let mut selected = BTreeSet::new();
    for name in names {
        let m: Submodule = name.as_ref().parse()?;
        if g.params().get(m).is_empty() {
            log::warn!("submodule {m} has no parameters in this backend");
        }
        selected.insert(m);
    }
    Ok(ParamView { selected })
}

/// Which gradients a generator backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub latent: bool,
    pub pose: bool,
    pub params: bool,
}

impl GradRequest {
    pub const INVERSION: GradRequest = GradRequest {
        latent: true,
        pose: true,
        params: false,
    };
    pub const PARAMS: GradRequest = GradRequest {
        latent: false,
        pose: false,
        params: true,
    };
    pub const ALL: GradRequest = GradRequest {
        latent: true,
        pose: true,
        params: true,
    };
}

#[derive(Debug, Clone)]
pub struct GeneratorGrads {
    /// Same layout as the latent values.
    pub latent: Option<Vec<f64>>,
    /// d loss / d yaw, per degree.
    pub yaw: f64,
    /// d loss / d pitch, per degree.
    pub pitch: f64,
    pub params: Option<ParamSet>,
}

/// 3D-aware generator `I = G(W, P; θ)`.
pub trait Generator3D: Send + Sync {
    /// `(layers, width)` of the style latent.
    fn latent_shape(&self) -> (usize, usize);
    /// `(height, width)` of rendered images.
    fn resolution(&self) -> (usize, usize);
    fn noise_width(&self) -> usize;
    /// Mapping network: noise `z` to one style vector of latent width.
    fn map_noise(&self, z: &[f64]) -> Vec<f64>;
    /// Accumulates mapping-parameter gradients for `d loss / d map_noise(z)`.
    fn map_noise_backward(&self, z: &[f64], grad_style: &[f64], grads: &mut ParamSet);
    fn generate(&self, w: &LatentCode, pose: &CameraPose) -> Result<Image>;
    fn backward(
        &self,
        w: &LatentCode,
        pose: &CameraPose,
        grad_image: &Image,
        request: GradRequest,
    ) -> Result<GeneratorGrads>;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn clone_box(&self) -> Box<dyn Generator3D>;
}

impl Clone for Box<dyn Generator3D> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Average of `samples` mapped noise draws, broadcast to every layer.
pub fn mean_latent(g: &dyn Generator3D, samples: usize, rng: &mut SeededRng) -> LatentCode {
    let (layers, width) = g.latent_shape();
    let mut acc = vec![0.0; width];
    for _ in 0..samples.max(1) {
        let z = rng.normal_vec(g.noise_width());
        for (a, v) in acc.iter_mut().zip(g.map_noise(&z)) {
            *a += v;
        }
    }
    let n = samples.max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    LatentCode::broadcast(&acc, layers)
}

/// Maps one noise draw and broadcasts it to a full latent.
pub fn mapped_noise_latent(g: &dyn Generator3D, z: &[f64]) -> LatentCode {
    LatentCode::broadcast(&g.map_noise(z), g.latent_shape().0)
}

/// 2D style generator used only for pose initialization; frozen.
pub trait Generator2D: Send + Sync {
    fn latent_shape(&self) -> (usize, usize);
    fn noise_width(&self) -> usize;
    fn map_noise(&self, z: &[f64]) -> Vec<f64>;
    fn generate(&self, w: &LatentCode) -> Result<Image>;
}

/// Encoder-based 2D inversion (the external inverter that turns a style
/// image into a 2D latent).
pub trait LatentEncoder2D: Send + Sync {
    fn encode(&self, image: &Image) -> Result<LatentCode>;
}

/// Off-the-shelf head-pose estimator for photo-realistic portraits.
pub trait PoseEstimator: Send + Sync {
    /// Fails with [`Error::PoseEstimation`] rather than returning a guess.
    fn estimate(&self, image: &Image) -> Result<CameraPose>;
}

/// Frozen joint image-text embedder.
pub trait JointEmbedder: Send + Sync {
    fn width(&self) -> usize;
    fn embed_image(&self, image: &Image) -> Result<Embedding>;
    /// Vector-Jacobian product of [`embed_image`](Self::embed_image).
    fn embed_image_backward(&self, image: &Image, grad: &[f64]) -> Result<Image>;
    fn embed_text(&self, text: &str) -> Result<Embedding>;
    /// Hash of all frozen weights.
    fn param_hash(&self) -> String;
}

/// Pairwise image distances used by the inversion and stylization losses.
/// Every `*_grad` method returns the value and its gradient with respect to
/// the first argument.
pub trait PerceptualOracle: Send + Sync {
    /// Mean squared pixel error.
    fn pixel_l2(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok(self.pixel_l2_grad(a, b)?.0)
    }
    fn pixel_l2_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)> {
        a.check_same_shape(b)?;
        let n = a.len() as f64;
        let mut grad = a.clone();
        let mut sum = 0.0;
        for (g, (x, y)) in grad
            .data_mut()
            .iter_mut()
            .zip(a.data().iter().zip(b.data()))
        {
            let d = x - y;
            sum += d * d;
            *g = 2.0 * d / n;
        }
        Ok((sum / n, grad))
    }
    fn perceptual(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok(self.perceptual_grad(a, b)?.0)
    }
    fn perceptual_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)>;
    /// Identity similarity in `[-1, 1]`.
    fn identity(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok(self.identity_grad(a, b)?.0)
    }
    fn identity_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)>;
    fn depth_map(&self, image: &Image) -> Vec<f64>;
    /// Mean squared difference of depth maps.
    fn depth_loss_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)>;
}

/// One complete set of backend components.
pub struct Backends {
    pub generator: Box<dyn Generator3D>,
    pub generator_2d: Box<dyn Generator2D>,
    pub encoder_2d: Box<dyn LatentEncoder2D>,
    pub pose_estimator: Box<dyn PoseEstimator>,
    pub embedder: Box<dyn JointEmbedder>,
    pub oracle: Box<dyn PerceptualOracle>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("latent_shape", &self.generator.latent_shape())
            .field("resolution", &self.generator.resolution())
            .finish_non_exhaustive()
    }
}
