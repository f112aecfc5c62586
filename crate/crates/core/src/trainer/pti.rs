//! Pivotal-tuning baseline: invert the target, then fine-tune the generator
//! around that single pivot latent with plain gradient descent.

use serde::{Deserialize, Serialize};

use crate::backends::{select_submodule_params, Backends, Generator3D};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inversion::{
    invert_style_image, InversionConfig, InversionResult, PoseInit, PoseInitMode,
};
use crate::optim::{OptimizerKind, ParamOptimizer};
use crate::stylizer::{apt_step, AptLoss, PairedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtiConfig {
    /// Generator fine-tuning steps after inversion.
    pub steps: usize,
    pub step_size: f64,
    pub loss: AptLoss,
    pub trainable: Vec<String>,
}

impl Default for PtiConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 1.0,
            loss: AptLoss::Perceptual,
            trainable: vec![
                "synthesis".into(),
                "superresolution".into(),
                "decoder".into(),
            ],
        }
    }
}

impl PtiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "pti.step_size must be > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

pub struct PtiResult {
    pub inversion: InversionResult,
    pub pose_init: PoseInit,
    pub generator: Box<dyn Generator3D>,
    /// Pixel MSE at the pivot before and after fine-tuning.
    pub mse_before: f64,
    pub mse_after: f64,
    /// Frobenius norm of the parameter change.
    pub param_change: f64,
}

impl std::fmt::Debug for PtiResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PtiResult")
            .field("pose_init", &self.pose_init)
            .field("mse_before", &self.mse_before)
            .field("mse_after", &self.mse_after)
            .field("param_change", &self.param_change)
            .finish_non_exhaustive()
    }
}

pub fn pti_invert_edit(
    target: &Image,
    inversion: &InversionConfig,
    cfg: &PtiConfig,
    backends: &Backends,
    pose_init: PoseInitMode,
) -> Result<PtiResult> {
    cfg.validate()?;
    let (inv, init) = invert_style_image(target, inversion, backends, pose_init)?;
    let mut g = backends.generator.clone_box();
    let view = select_submodule_params(g.as_ref(), &cfg.trainable)?;
    let mut opt = ParamOptimizer::new(OptimizerKind::Sgd, cfg.step_size);
    let oracle = backends.oracle.as_ref();
    let render = |g: &dyn Generator3D| g.generate(&inv.w3d, &inv.pose);
    let mse_before = oracle.pixel_l2(&render(g.as_ref())?, target)?;
    for step in 0..cfg.steps {
        let sample = PairedSample {
            latent: inv.w3d.clone(),
            pose: inv.pose,
            image: render(g.as_ref())?,
        };
        apt_step(
            target,
            &[sample],
            g.as_mut(),
            oracle,
            cfg.loss,
            &mut opt,
            &view,
            step,
        )
        .map_err(|e| match e {
            Error::Divergence { step, .. } => Error::Divergence {
                stage: crate::error::Stage::Pti,
                step,
            },
            other => other,
        })?;
    }
    let mse_after = oracle.pixel_l2(&render(g.as_ref())?, target)?;
    let param_change = g.params().distance(backends.generator.params());
    Ok(PtiResult {
        inversion: inv,
        pose_init: init,
        generator: g,
        mse_before,
        mse_after,
        param_change,
    })
}
