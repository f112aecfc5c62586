//! Artistic inversion: pose initialization through the photo domain, then
//! joint optimization of the 3D latent and camera pose against the style
//! image.

use serde::{Deserialize, Serialize};

use crate::backends::{
    mean_latent, Backends, Generator2D, Generator3D, GradRequest, PerceptualOracle, PoseEstimator,
};
use crate::error::{Error, Result, Stage};
use crate::image::Image;
use crate::latent::{mix_latent, LatentCode, LayerRange};
use crate::optim::Adam;
use crate::pose::{canonical_pose, AngleRange, CameraPose};
use crate::rng::SeededRng;

/// Largest |yaw| and |pitch| the optimizer may move the camera to.
const POSE_LIMIT: f64 = 85.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l2: f64,
    pub lpips: f64,
    pub id: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l2: 1.0,
            lpips: 0.8,
            id: 0.1,
            depth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("l2", self.l2),
            ("lpips", self.lpips),
            ("id", self.id),
            ("depth", self.depth),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "inversion.weights.{name} must be a finite value >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base step size to 5% of it.
    Cosine,
}

impl Schedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub alpha: f64,
    pub perturb_range_2d: LayerRange,
    pub steps: usize,
    /// Adam step size for the latent.
    pub step_size: f64,
    /// Adam step size for yaw and pitch, in degrees.
    pub pose_step_size: f64,
    pub schedule: Schedule,
    pub weights: LossWeights,
    /// Noise draws averaged for the initial latent.
    pub mean_latent_samples: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            perturb_range_2d: LayerRange::new(13, 18),
            steps: 500,
            step_size: 0.01,
            pose_step_size: 0.1,
            schedule: Schedule::Cosine,
            weights: LossWeights::default(),
            mean_latent_samples: 10_000,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "inversion.alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("inversion.steps must be at least 1".into()));
        }
        for (name, v) in [
            ("step_size", self.step_size),
            ("pose_step_size", self.pose_step_size),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "inversion.{name} must be >= 0, got {v}"
                )));
            }
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l2: f64,
    pub lpips: f64,
    /// `1 - identity similarity`.
    pub id: f64,
    pub depth: f64,
}

#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: f64,
    pub terms: LossTerms,
    /// Gradient of `total` with respect to the generated image.
    pub grad: Image,
}

/// Weighted sum of pixel, perceptual, identity and depth distances between
/// a generated image and its target.
pub fn composite_inversion_loss(
    generated: &Image,
    target: &Image,
    oracle: &dyn PerceptualOracle,
    weights: &LossWeights,
) -> Result<CompositeLoss> {
    generated.check_same_shape(target)?;
    let mut grad = Image::filled(
        generated.height(),
        generated.width(),
        generated.channels(),
        0.0,
    );
    let mut terms = LossTerms::default();
    let mut add = |w: f64, g: &Image| {
        if w != 0.0 {
            grad.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += w * b);
        }
    };
    let (l2, g) = oracle.pixel_l2_grad(generated, target)?;
    terms.l2 = l2;
    add(weights.l2, &g);
    let (lp, g) = oracle.perceptual_grad(generated, target)?;
    terms.lpips = lp;
    add(weights.lpips, &g);
    let (sim, g) = oracle.identity_grad(generated, target)?;
    terms.id = 1.0 - sim;
    add(-weights.id, &g);
    let (dp, g) = oracle.depth_loss_grad(generated, target)?;
    terms.depth = dp;
    add(weights.depth, &g);
    let total = weights.l2 * terms.l2
        + weights.lpips * terms.lpips
        + weights.id * terms.id
        + weights.depth * terms.depth;
    Ok(CompositeLoss { total, terms, grad })
}

/// Camera pose of the style image, read off a photo-domain render of its
/// perturbed 2D latent.
pub fn init_pose_from_photo(
    style_image: &Image,
    w2d: &LatentCode,
    rng: &mut SeededRng,
    cfg: &InversionConfig,
    g2d: &dyn Generator2D,
    estimator: &dyn PoseEstimator,
) -> Result<CameraPose> {
    if style_image.is_empty() {
        return Err(Error::Dimension("style image is empty".into()));
    }
    let z = rng.normal_vec(g2d.noise_width());
    let injected = LatentCode::broadcast(&g2d.map_noise(&z), w2d.layers());
    let perturbed = mix_latent(w2d, &injected, cfg.alpha, cfg.perturb_range_2d)?;
    let render = g2d.generate(&perturbed)?;
    estimator.estimate(&render)
}

/// Yaw and pitch ranges of the random starting pose.
pub const RANDOM_INIT_YAW: AngleRange = AngleRange::new(-50.0, 50.0);
pub const RANDOM_INIT_PITCH: AngleRange = AngleRange::new(-30.0, 30.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseInitMode {
    /// Estimate the pose from a photo-domain render of the 2D inversion.
    Estimate,
    /// Seeded random yaw and pitch, for ablations.
    Random,
}

/// Where the starting pose of an inversion came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PoseInit {
    Estimated {
        yaw: f64,
        pitch: f64,
    },
    Random {
        yaw: f64,
        pitch: f64,
    },
    /// Frontal pose, used when the estimator gave up.
    Canonical {
        reason: String,
    },
}

impl PoseInit {
    pub fn pose(&self) -> CameraPose {
        match self {
            PoseInit::Estimated { yaw, pitch } | PoseInit::Random { yaw, pitch } => {
                CameraPose::from_yaw_pitch(*yaw, *pitch)
            }
            PoseInit::Canonical { .. } => canonical_pose(),
        }
    }
}

/// Full inversion of a style image: a starting pose (estimated through the
/// 2D encoder, or random), then [`invert_artistic`].
pub fn invert_style_image(
    style_image: &Image,
    cfg: &InversionConfig,
    backends: &Backends,
    mode: PoseInitMode,
) -> Result<(InversionResult, PoseInit)> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let init = match mode {
        PoseInitMode::Estimate => {
            let mut rng = root.fork("inversion/pose-init");
            let estimated = backends.encoder_2d.encode(style_image).and_then(|w2d| {
                init_pose_from_photo(
                    style_image,
                    &w2d,
                    &mut rng,
                    cfg,
                    backends.generator_2d.as_ref(),
                    backends.pose_estimator.as_ref(),
                )
            });
            match estimated {
                Ok(p) => PoseInit::Estimated {
                    yaw: p.yaw(),
                    pitch: p.pitch(),
                },
                Err(Error::PoseEstimation(reason)) => {
                    log::warn!(
                        "pose estimation failed ({reason}); starting from the canonical pose"
                    );
                    PoseInit::Canonical { reason }
                }
                Err(e) => return Err(e),
            }
        }
        PoseInitMode::Random => {
            let mut rng = root.fork("inversion/random-pose");
            PoseInit::Random {
                yaw: rng.uniform(RANDOM_INIT_YAW.lo, RANDOM_INIT_YAW.hi),
                pitch: rng.uniform(RANDOM_INIT_PITCH.lo, RANDOM_INIT_PITCH.hi),
            }
        }
    };
    let result = invert_artistic(
        style_image,
        &init.pose(),
        cfg,
        backends.generator.as_ref(),
        backends.oracle.as_ref(),
    )?;
    Ok((result, init))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRecord {
    pub step: usize,
    pub total: f64,
    pub terms: LossTerms,
    pub best: f64,
    pub yaw: f64,
    pub pitch: f64,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub w3d: LatentCode,
    pub pose: CameraPose,
    /// Loss terms of the returned iterate.
    pub losses: LossTerms,
    pub total: f64,
    /// Optimizer steps taken.
    pub steps: usize,
    /// One record per evaluated iterate (`steps + 1` in total).
    pub history: Vec<InversionRecord>,
}

/// Optimizes `(W, yaw, pitch)` from the generator's mean latent and the
/// given pose, returning the best iterate seen.
pub fn invert_artistic(
    style_image: &Image,
    init_pose: &CameraPose,
    cfg: &InversionConfig,
    g3d: &dyn Generator3D,
    oracle: &dyn PerceptualOracle,
) -> Result<InversionResult> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed).fork("inversion/mean-latent");
    let init = mean_latent(g3d, cfg.mean_latent_samples, &mut rng);
    invert_from(style_image, init, init_pose, cfg, g3d, oracle)
}

/// [`invert_artistic`] from an explicit starting latent.
pub fn invert_from(
    style_image: &Image,
    init_latent: LatentCode,
    init_pose: &CameraPose,
    cfg: &InversionConfig,
    g3d: &dyn Generator3D,
    oracle: &dyn PerceptualOracle,
) -> Result<InversionResult> {
    cfg.validate()?;
    init_pose.validate()?;
    let mut w = init_latent;
    let mut angles = [init_pose.yaw(), init_pose.pitch()];
    let mut latent_opt = Adam::new(cfg.step_size, w.values().len());
    let mut pose_opt = Adam::new(cfg.pose_step_size, 2);
    let mut best: Option<(f64, LossTerms, LatentCode, [f64; 2])> = None;
    let mut history = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let pose = CameraPose::from_yaw_pitch(angles[0], angles[1]);
        let image = g3d.generate(&w, &pose)?;
        let loss = composite_inversion_loss(&image, style_image, oracle, &cfg.weights)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                stage: Stage::Inversion,
                step,
            });
        }
        if best.as_ref().is_none_or(|b| loss.total < b.0) {
            best = Some((loss.total, loss.terms, w.clone(), angles));
        }
        let best_total = best.as_ref().map_or(loss.total, |b| b.0);
        history.push(InversionRecord {
            step,
            total: loss.total,
            terms: loss.terms,
            best: best_total,
            yaw: angles[0],
            pitch: angles[1],
        });
        log::debug!(
            "inversion step {step}: loss {:.6} best {:.6}",
            loss.total,
            best_total
        );
        if step == cfg.steps {
            break;
        }
        let grads = g3d.backward(&w, &pose, &loss.grad, GradRequest::INVERSION)?;
        let factor = cfg.schedule.factor(step, cfg.steps);
        let gw = grads.latent.expect("latent gradient requested");
        latent_opt.step_with_lr(w.values_mut(), &gw, cfg.step_size * factor)?;
        pose_opt.step_with_lr(
            &mut angles,
            &[grads.yaw, grads.pitch],
            cfg.pose_step_size * factor,
        )?;
        for a in &mut angles {
            *a = a.clamp(-POSE_LIMIT, POSE_LIMIT);
        }
    }

    let (total, losses, w3d, angles) = best.expect("at least one iterate evaluated");
    Ok(InversionResult {
        w3d,
        pose: CameraPose::from_yaw_pitch(angles[0], angles[1]),
        losses,
        total,
        steps: cfg.steps,
        history,
    })
}
