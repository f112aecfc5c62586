//! Reconstruction metrics for inversion and ablation reports.

use serde::{Deserialize, Serialize};

use crate::backends::PerceptualOracle;
use crate::error::{Error, Result};
use crate::image::{Image, ImageBatch};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    pub perceptual: f64,
    pub identity: f64,
}

/// PSNR for unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Mean SSIM over all 8x8 windows (stride 1) and channels. Images smaller
/// than the window use a single window covering the whole image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w, c) = a.shape();
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let (p, q) = (a.at(y, x, ch), b.at(y, x, ch));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn evaluate_pair(a: &Image, b: &Image, oracle: &dyn PerceptualOracle) -> Result<MetricsReport> {
    let mse = mse(a, b)?;
    Ok(MetricsReport {
        mse,
        ssim: ssim(a, b)?,
        psnr_db: psnr_from_mse(mse),
        perceptual: oracle.perceptual(a, b)?,
        identity: oracle.identity(a, b)?,
    })
}

/// Per-pair metrics averaged over the batch; PSNR is taken from the mean
/// MSE so the two fields stay consistent.
pub fn evaluate_batch(
    a: &ImageBatch,
    b: &ImageBatch,
    oracle: &dyn PerceptualOracle,
) -> Result<MetricsReport> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "batches of {} and {} images cannot be compared",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mut acc = MetricsReport {
        mse: 0.0,
        ssim: 0.0,
        psnr_db: 0.0,
        perceptual: 0.0,
        identity: 0.0,
    };
    for (x, y) in a.iter().zip(b.iter()) {
        let r = evaluate_pair(x, y, oracle)?;
        acc.mse += r.mse / n;
        acc.ssim += r.ssim / n;
        acc.perceptual += r.perceptual / n;
        acc.identity += r.identity / n;
    }
    acc.psnr_db = psnr_from_mse(acc.mse);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{ToyEmbedder, ToyOracle};
    use crate::rng::SeededRng;

    fn oracle() -> ToyOracle {
        ToyOracle::new(2, ToyEmbedder::new(1))
    }

    fn random_image(seed: u64, size: usize) -> Image {
        let mut rng = SeededRng::new(seed);
        let data = (0..size * size * 3)
            .map(|_| rng.uniform(0.0, 1.0))
            .collect();
        Image::new(size, size, 3, data).unwrap()
    }

    #[test]
    fn self_comparison() {
        let a = random_image(1, 16);
        let r = evaluate_pair(&a, &a, &oracle()).unwrap();
        assert_eq!(r.mse, 0.0);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.psnr_db, PSNR_CAP_DB);
        assert_eq!(r.perceptual, 0.0);
        assert!((r.identity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset() {
        let a = Image::filled(16, 16, 3, 0.3);
        let b = Image::filled(16, 16, 3, 0.4);
        let r = evaluate_pair(&a, &b, &oracle()).unwrap();
        assert!((r.mse - 0.01).abs() < 1e-12);
        assert!((r.psnr_db - 20.0).abs() < 1e-9);
    }

    #[test]
    fn mse_matches_pixel_loop_and_is_symmetric() {
        let (a, b) = (random_image(3, 16), random_image(4, 16));
        let mut direct = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    direct += (a.at(y, x, c) - b.at(y, x, c)).powi(2);
                }
            }
        }
        direct /= 768.0;
        let o = oracle();
        let ab = evaluate_pair(&a, &b, &o).unwrap();
        let ba = evaluate_pair(&b, &a, &o).unwrap();
        assert!((ab.mse - direct).abs() < 1e-10);
        assert!((ab.ssim - ba.ssim).abs() < 1e-9);
        assert!((ab.perceptual - ba.perceptual).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&ab.ssim));
        assert!((psnr_from_mse(ab.mse) - ab.psnr_db).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let r = evaluate_pair(&random_image(1, 8), &random_image(1, 16), &oracle());
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_average() {
        let a = ImageBatch(vec![random_image(1, 8), random_image(2, 8)]);
        let b = ImageBatch(vec![random_image(1, 8), random_image(3, 8)]);
        let r = evaluate_batch(&a, &b, &oracle()).unwrap();
        let second = mse(&a[1], &b[1]).unwrap();
        assert!((r.mse - second / 2.0).abs() < 1e-12);
        assert!((psnr_from_mse(r.mse) - r.psnr_db).abs() < 1e-9);
    }
}
