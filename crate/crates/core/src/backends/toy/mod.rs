//! Deterministic desk-scale backend. Every component is a small closed-form
//! function of a seed, differentiable where the pipeline needs gradients.

pub mod embedder;
pub mod generator;
pub mod oracle;
pub mod pose;
pub(crate) mod render;

use serde::{Deserialize, Serialize};

pub use embedder::ToyEmbedder;
pub use generator::{ToyGenerator2D, ToyGenerator3D};
pub use oracle::ToyOracle;
pub use pose::{fit_silhouette, SilhouetteFit, ToyEncoder2D, ToyPoseEstimator};

use crate::backends::{mapped_noise_latent, Backends, Generator3D};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentCode;
use crate::pose::{AngleRange, CameraPose};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBackendConfig {
    pub seed: u64,
    pub resolution: usize,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 64,
        }
    }
}

impl ToyBackendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(8..=512).contains(&self.resolution) {
            return Err(Error::Config(format!(
                "backend.resolution must lie in [8, 512], got {}",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn generator(&self) -> ToyGenerator3D {
        ToyGenerator3D::new(self.seed, self.resolution)
    }

    pub fn embedder(&self) -> ToyEmbedder {
        ToyEmbedder::new(self.seed.wrapping_add(1))
    }

    pub fn build(&self) -> Result<Backends> {
        self.validate()?;
        let g2d = ToyGenerator2D::new(self.seed.wrapping_add(2), self.resolution);
        let embedder = self.embedder();
        Ok(Backends {
            generator: Box::new(self.generator()),
            generator_2d: Box::new(g2d.clone()),
            encoder_2d: Box::new(ToyEncoder2D::new(self.seed.wrapping_add(3), g2d)),
            pose_estimator: Box::new(ToyPoseEstimator::default()),
            embedder: Box::new(embedder.clone()),
            oracle: Box::new(ToyOracle::new(self.seed.wrapping_add(4), embedder)),
        })
    }
}

/// A synthetic target image with its ground-truth latent and pose.
#[derive(Debug, Clone)]
pub struct ToyCase {
    pub image: Image,
    pub latent: LatentCode,
    pub pose: CameraPose,
}

const CASE_YAW: AngleRange = AngleRange::new(-40.0, 40.0);
const CASE_PITCH: AngleRange = AngleRange::new(-20.0, 20.0);

fn sample_case(g: &ToyGenerator3D, rng: &mut SeededRng) -> Result<ToyCase> {
    let mut latent = mapped_noise_latent(g, &rng.normal_vec(g.noise_width()));
    for v in latent.values_mut() {
        *v += 0.2 * rng.standard_normal();
    }
    let pose = CameraPose::from_yaw_pitch(
        rng.uniform(CASE_YAW.lo, CASE_YAW.hi),
        rng.uniform(CASE_PITCH.lo, CASE_PITCH.hi),
    );
    let image = g.generate(&latent, &pose)?;
    Ok(ToyCase {
        image,
        latent,
        pose,
    })
}

/// Artistic target: rendered by a stylized copy of the backend generator
/// at a random head pose.
pub fn artistic_case(cfg: &ToyBackendConfig, case_seed: u64) -> Result<ToyCase> {
    cfg.validate()?;
    let styled = cfg.generator().stylized(case_seed);
    sample_case(
        &styled,
        &mut SeededRng::new(case_seed).fork("case/artistic"),
    )
}

/// Photo-domain target rendered by the backend generator itself.
pub fn photo_case(cfg: &ToyBackendConfig, case_seed: u64) -> Result<ToyCase> {
    cfg.validate()?;
    sample_case(
        &cfg.generator(),
        &mut SeededRng::new(case_seed).fork("case/photo"),
    )
}
