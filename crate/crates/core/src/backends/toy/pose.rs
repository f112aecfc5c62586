use crate::backends::{LatentEncoder2D, PoseEstimator};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentCode;
use crate::pose::CameraPose;
use crate::rng::SeededRng;

use super::embedder::{matvec, pool, POOLED_LEN};
use super::generator::{ToyGenerator2D, LAYERS_2D, PITCH_LIMIT, POSE_LAYERS, YAW_LIMIT};
use super::render;

/// Result of fitting the face-mask template to an image's foreground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilhouetteFit {
    pub yaw: f64,
    pub pitch: f64,
    /// Residual norm relative to the foreground norm, in `[0, 1]`.
    pub relative_residual: f64,
}

/// Colour distance above which a pixel counts as foreground.
const FOREGROUND_THRESHOLD: f64 = 0.01;

/// Binary foreground mask: pixels whose colour differs from the background
/// (median of the image border).
fn foreground(image: &Image) -> Vec<f64> {
    let (h, w, c) = image.shape();
    let mut bg = vec![0.0; c];
    for (ch, b) in bg.iter_mut().enumerate() {
        let mut border: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| y == 0 || x == 0 || y == h - 1 || x == w - 1)
            .map(|(y, x)| image.at(y, x, ch))
            .collect();
        border.sort_by(f64::total_cmp);
        *b = border[border.len() / 2];
    }
    image
        .data()
        .chunks_exact(c)
        .map(|px| {
            let d = px
                .iter()
                .zip(&bg)
                .map(|(v, b)| (v - b) * (v - b))
                .sum::<f64>()
                .sqrt();
            if d > FOREGROUND_THRESHOLD {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Grid search over yaw/pitch, keeping the template that explains the
/// most of the foreground mask under a free positive scale.
pub fn fit_silhouette(image: &Image) -> Result<SilhouetteFit> {
    let (h, w, _) = image.shape();
    if h < 4 || w < 4 {
        return Err(Error::PoseEstimation(format!("image {h}x{w} is too small")));
    }
    let fg = foreground(image);
    let energy: f64 = fg.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::PoseEstimation("no foreground found".into()));
    }
    let mut template = Vec::with_capacity(h * w);
    let mut score = |yaw: f64, pitch: f64| {
        render::mask_template(h, w, yaw, pitch, &mut template);
        let ft: f64 = fg.iter().zip(&template).map(|(a, b)| a * b).sum();
        let tt: f64 = template.iter().map(|v| v * v).sum();
        if ft <= 0.0 {
            0.0
        } else {
            ft * ft / tt
        }
    };
    let mut best = (0.0, 0.0, f64::NEG_INFINITY);
    for yi in -20..=20 {
        for pi in -15..=15 {
            let (yaw, pitch) = (yi as f64 * 4.0, pi as f64 * 4.0);
            let s = score(yaw, pitch);
            if s > best.2 {
                best = (yaw, pitch, s);
            }
        }
    }
    let mut search = |yc: f64, pc: f64, half: f64, step: f64, best: &mut (f64, f64, f64)| {
        let k = (half / step).round() as i64;
        for i in -k..=k {
            let yaw = (yc + i as f64 * step).clamp(-YAW_LIMIT, YAW_LIMIT);
            for j in -k..=k {
                let pitch = (pc + j as f64 * step).clamp(-PITCH_LIMIT, PITCH_LIMIT);
                let s = score(yaw, pitch);
                if s > best.2 {
                    *best = (yaw, pitch, s);
                }
            }
        }
    };
    search(best.0, best.1, 4.0, 0.5, &mut best);
    search(best.0, best.1, 0.5, 0.05, &mut best);
    let relative_residual = ((energy - best.2).max(0.0) / energy).sqrt();
    Ok(SilhouetteFit {
        yaw: best.0,
        pitch: best.1,
        relative_residual,
    })
}

/// Toy head-pose estimator: silhouette fit, rejecting images it cannot
/// explain instead of guessing.
#[derive(Debug, Clone)]
pub struct ToyPoseEstimator {
    pub max_relative_residual: f64,
}

impl Default for ToyPoseEstimator {
    fn default() -> Self {
        Self {
            max_relative_residual: 0.6,
        }
    }
}

impl PoseEstimator for ToyPoseEstimator {
    fn estimate(&self, image: &Image) -> Result<CameraPose> {
        let fit = fit_silhouette(image)?;
        if fit.relative_residual > self.max_relative_residual {
            return Err(Error::PoseEstimation(format!(
                "silhouette fit residual {:.3} exceeds {:.3}",
                fit.relative_residual, self.max_relative_residual
            )));
        }
        Ok(CameraPose::from_yaw_pitch(fit.yaw, fit.pitch))
    }
}

/// Toy stand-in for an encoder-based 2D inverter: recovers head pose from
/// the silhouette and appearance from pooled colours.
#[derive(Debug, Clone)]
pub struct ToyEncoder2D {
    generator: ToyGenerator2D,
    mean: LatentCode,
    appearance: Vec<f64>,
}

impl ToyEncoder2D {
    pub fn new(seed: u64, generator: ToyGenerator2D) -> Self {
        let root = SeededRng::new(seed);
        let mean = generator.mean_latent(1000, &mut root.fork("enc2d/mean"));
        let s = 0.5 / (POOLED_LEN as f64).sqrt();
        let width = mean.width();
        let appearance = root
            .fork("enc2d/appearance")
            .normal_vec(width * POOLED_LEN)
            .into_iter()
            .map(|v| v * s)
            .collect();
        Self {
            generator,
            mean,
            appearance,
        }
    }
}

impl LatentEncoder2D for ToyEncoder2D {
    fn encode(&self, image: &Image) -> Result<LatentCode> {
        let fit = fit_silhouette(image)?;
        let offset = matvec(&self.appearance, POOLED_LEN, &pool(image)?);
        let mut w = self.mean.clone();
        let width = w.width();
        let first_fine = POSE_LAYERS.end() + 1;
        for l in first_fine..=LAYERS_2D {
            let row = &mut w.values_mut()[(l - 1) * width..l * width];
            row.iter_mut().zip(&offset).for_each(|(v, o)| *v += o);
        }
        self.generator.set_pose(&mut w, fit.yaw, fit.pitch);
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::generator::ToyGenerator3D;
    use crate::backends::{mapped_noise_latent, Generator2D, Generator3D};

    #[test]
    fn recovers_pose_of_photo_renders() {
        let g = ToyGenerator3D::new(1, 64);
        let est = ToyPoseEstimator::default();
        let mut rng = SeededRng::new(4);
        for _ in 0..5 {
            let w = mapped_noise_latent(&g, &rng.normal_vec(g.noise_width()));
            let (yaw, pitch) = (rng.uniform(-45.0, 45.0), rng.uniform(-25.0, 25.0));
            let img = g
                .generate(&w, &CameraPose::from_yaw_pitch(yaw, pitch))
                .unwrap();
            let p = est.estimate(&img).unwrap();
            assert!((p.yaw() - yaw).abs() < 2.0, "yaw {} vs {yaw}", p.yaw());
            assert!(
                (p.pitch() - pitch).abs() < 2.0,
                "pitch {} vs {pitch}",
                p.pitch()
            );
        }
    }

    #[test]
    fn blank_image_fails_explicitly() {
        let est = ToyPoseEstimator::default();
        let blank = Image::filled(32, 32, 3, 0.4);
        assert!(matches!(
            est.estimate(&blank),
            Err(Error::PoseEstimation(_))
        ));
    }

    #[test]
    fn encoder_latent_renders_at_the_same_pose() {
        let g2 = ToyGenerator2D::new(2, 64);
        let enc = ToyEncoder2D::new(3, g2.clone());
        let g = ToyGenerator3D::new(1, 64).stylized(9);
        let w = mapped_noise_latent(&g, &SeededRng::new(5).normal_vec(g.noise_width()));
        let img = g
            .generate(&w, &CameraPose::from_yaw_pitch(-20.0, 10.0))
            .unwrap();
        let w2 = enc.encode(&img).unwrap();
        assert_eq!(w2.layers(), LAYERS_2D);
        let (yaw, pitch) = g2.pose_of(&w2);
        assert!(
            (yaw + 20.0).abs() < 2.0 && (pitch - 10.0).abs() < 2.0,
            "{yaw} {pitch}"
        );
        assert!(g2.generate(&w2).unwrap().in_unit_range());
    }
}
