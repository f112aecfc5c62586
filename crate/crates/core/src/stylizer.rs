//! Paired-sample construction and one-shot fine-tuning of the stylized
//! generator.

use serde::{Deserialize, Serialize};

use crate::backends::{Generator3D, GradRequest, ParamSet, ParamView, PerceptualOracle};
use crate::error::{Error, Result, Stage};
use crate::image::Image;
use crate::latent::{mix_latent, LatentCode, LayerRange};
use crate::optim::ParamOptimizer;
use crate::pose::CameraPose;
use crate::rng::SeededRng;

pub const BETA_MAX: f64 = 0.2;

/// Interpolation weight kept on the inverted latent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Beta {
    Fixed(f64),
    /// Drawn per sample from `Uniform(lo, hi)`.
    Uniform {
        lo: f64,
        hi: f64,
    },
}

impl Beta {
    fn draw(self, rng: &mut SeededRng) -> f64 {
        match self {
            Beta::Fixed(b) => b,
            Beta::Uniform { lo, hi } => rng.uniform(lo, hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AptLoss {
    Perceptual,
    PixelL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StylizeConfig {
    pub beta: Beta,
    pub perturb_range_3d: LayerRange,
    pub batch_size: usize,
    pub loss: AptLoss,
}

impl Default for StylizeConfig {
    fn default() -> Self {
        Self {
            beta: Beta::Fixed(0.1),
            perturb_range_3d: LayerRange::new(9, 13),
            batch_size: 2,
            loss: AptLoss::Perceptual,
        }
    }
}

impl StylizeConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        let ok = |b: f64| (0.0..=BETA_MAX).contains(&b);
        let valid = match self.beta {
            Beta::Fixed(b) => ok(b),
            Beta::Uniform { lo, hi } => ok(lo) && ok(hi) && lo <= hi,
        };
        if !valid {
            return Err(Error::Config(format!(
                "stylize.beta must lie in [0, {BETA_MAX}], got {:?}",
                self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(
                "stylize.batch_size must be at least 1".into(),
            ));
        }
        self.perturb_range_3d.validate(layers)
    }
}

/// One training pair: perturbed latent, its camera, and the stylized render.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub latent: LatentCode,
    pub pose: CameraPose,
    pub image: Image,
}

/// Perturbs layers of the inverted latent with fresh mapped noise and
/// renders the result through the stylized generator.
pub fn make_paired_sample(
    w3d: &LatentCode,
    pose: &CameraPose,
    rng: &mut SeededRng,
    cfg: &StylizeConfig,
    g3d_s: &dyn Generator3D,
) -> Result<PairedSample> {
    cfg.validate(w3d.layers())?;
    let z = rng.normal_vec(g3d_s.noise_width());
    let beta = cfg.beta.draw(rng);
    paired_sample_with(w3d, pose, &z, beta, cfg.perturb_range_3d, g3d_s)
}

/// [`make_paired_sample`] with explicit noise and weight; accepts any
/// weight in `[0, 1]`.
pub fn paired_sample_with(
    w3d: &LatentCode,
    pose: &CameraPose,
    z: &[f64],
    beta: f64,
    range: LayerRange,
    g3d_s: &dyn Generator3D,
) -> Result<PairedSample> {
    let injected = LatentCode::broadcast(&g3d_s.map_noise(z), w3d.layers());
    let latent = mix_latent(w3d, &injected, beta, range)?;
    let image = g3d_s.generate(&latent, pose)?;
    Ok(PairedSample {
        latent,
        pose: *pose,
        image,
    })
}

fn sample_loss(
    loss: AptLoss,
    oracle: &dyn PerceptualOracle,
    image: &Image,
    style: &Image,
) -> Result<(f64, Image)> {
    match loss {
        AptLoss::Perceptual => oracle.perceptual_grad(image, style),
        AptLoss::PixelL2 => oracle.pixel_l2_grad(image, style),
    }
}

/// Mean distance from each sample's render to the style image.
pub fn apt_loss(
    style_image: &Image,
    samples: &[PairedSample],
    oracle: &dyn PerceptualOracle,
    loss: AptLoss,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(loss, oracle, &s.image, style_image)?.0;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// One gradient step on the selected submodules of `g3d_s`, pulling the
/// samples' renders toward the style image. Returns the pre-step loss.
#[allow(clippy::too_many_arguments)]
pub fn apt_step(
    style_image: &Image,
    samples: &[PairedSample],
    g3d_s: &mut dyn Generator3D,
    oracle: &dyn PerceptualOracle,
    loss: AptLoss,
    optimizer: &mut ParamOptimizer,
    view: &ParamView,
    step: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config(
            "apt_step needs at least one paired sample".into(),
        ));
    }
    let n = samples.len() as f64;
    let mut total = 0.0;
    let mut grads = ParamSet::zeros_like(g3d_s.params());
    for s in samples {
        let (value, mut g_img) = sample_loss(loss, oracle, &s.image, style_image)?;
        total += value / n;
        g_img.data_mut().iter_mut().for_each(|v| *v /= n);
        let g = g3d_s.backward(&s.latent, &s.pose, &g_img, GradRequest::PARAMS)?;
        grads.add_assign(&g.params.expect("parameter gradient requested"));
    }
    if !total.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence {
            stage: Stage::Apt,
            step,
        });
    }
    optimizer.step(g3d_s.params_mut(), &grads, view)?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{
        artistic_case, ToyBackendConfig, ToyEmbedder, ToyGenerator3D, ToyOracle,
    };
    use crate::backends::{select_submodule_params, Submodule};
    use crate::optim::OptimizerKind;

    fn setup() -> (ToyGenerator3D, ToyOracle, LatentCode, CameraPose) {
        let cfg = ToyBackendConfig {
            seed: 1,
            resolution: 32,
        };
        let case = artistic_case(&cfg, 5).unwrap();
        (
            cfg.generator(),
            ToyOracle::new(2, ToyEmbedder::new(3)),
            case.latent,
            case.pose,
        )
    }

    #[test]
    fn weight_one_reproduces_the_latent() {
        let (g, _, w, p) = setup();
        let z = SeededRng::new(0).normal_vec(512);
        let s = paired_sample_with(&w, &p, &z, 1.0, LayerRange::new(9, 13), &g).unwrap();
        assert_eq!(s.latent, w);
        assert_eq!(s.image, g.generate(&w, &p).unwrap());
    }

    #[test]
    fn samples_are_deterministic_and_masked() {
        let (g, _, w, p) = setup();
        let cfg = StylizeConfig::default();
        let a = make_paired_sample(&w, &p, &mut SeededRng::new(9), &cfg, &g).unwrap();
        let b = make_paired_sample(&w, &p, &mut SeededRng::new(9), &cfg, &g).unwrap();
        assert_eq!(a, b);
        for l in (1..=8).chain(14..=14) {
            assert_eq!(a.latent.layer(l), w.layer(l));
        }
        assert_ne!(a.latent.layer(9), w.layer(9));
    }

    #[test]
    fn beta_outside_interval_is_rejected() {
        let cfg = StylizeConfig {
            beta: Beta::Fixed(0.5),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(14), Err(Error::Config(_))));
        let cfg = StylizeConfig {
            beta: Beta::Uniform { lo: 0.0, hi: 0.2 },
            ..Default::default()
        };
        cfg.validate(14).unwrap();
        let parsed: StylizeConfig = toml::from_str("beta = { lo = 0.0, hi = 0.2 }").unwrap();
        assert_eq!(parsed.beta, Beta::Uniform { lo: 0.0, hi: 0.2 });
    }

    #[test]
    fn zero_loss_leaves_parameters_unchanged() {
        let (mut g, o, w, p) = setup();
        let s = make_paired_sample(
            &w,
            &p,
            &mut SeededRng::new(1),
            &StylizeConfig::default(),
            &g,
        )
        .unwrap();
        let view =
            select_submodule_params(&g, &["synthesis", "superresolution", "decoder"]).unwrap();
        let mut opt = ParamOptimizer::new(OptimizerKind::Adam, 2e-3);
        let before = g.params().clone();
        let style = s.image.clone();
        let loss = apt_step(
            &style,
            &[s],
            &mut g,
            &o,
            AptLoss::Perceptual,
            &mut opt,
            &view,
            0,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.params(), &before);
    }

    #[test]
    fn fine_tuning_reduces_loss_and_keeps_mapping() {
        let (mut g, o, w, p) = setup();
        let cfg = ToyBackendConfig {
            seed: 1,
            resolution: 32,
        };
        let style = artistic_case(&cfg, 5).unwrap().image;
        let view =
            select_submodule_params(&g, &["synthesis", "superresolution", "decoder"]).unwrap();
        let mut opt = ParamOptimizer::new(OptimizerKind::Adam, 2e-3);
        let mapping = g.params().submodule_hash(Submodule::Mapping);
        let mut rng = SeededRng::new(3);
        let scfg = StylizeConfig::default();
        let mut losses = Vec::new();
        for step in 0..200 {
            let batch: Vec<_> = (0..2)
                .map(|_| make_paired_sample(&w, &p, &mut rng, &scfg, &g).unwrap())
                .collect();
            losses.push(
                apt_step(
                    &style,
                    &batch,
                    &mut g,
                    &o,
                    AptLoss::Perceptual,
                    &mut opt,
                    &view,
                    step,
                )
                .unwrap(),
            );
        }
        assert!(
            losses[199] <= 0.5 * losses[0],
            "{} -> {}",
            losses[0],
            losses[199]
        );
        assert_eq!(g.params().submodule_hash(Submodule::Mapping), mapping);
    }
}
