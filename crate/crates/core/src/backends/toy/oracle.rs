use crate::backends::PerceptualOracle;
use crate::error::Result;
use crate::image::Image;
use crate::rng::SeededRng;

use super::embedder::{matvec, matvec_t, pool, pool_backward, ToyEmbedder, POOLED_LEN};

const IDENTITY_WIDTH: usize = 128;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Toy perceptual oracle.
///
/// * perceptual: mean squared difference of [`ToyEmbedder::features`]
/// * identity: cosine similarity under a second frozen projection
/// * depth: 3x3 box-filtered luminance
#[derive(Debug, Clone)]
pub struct ToyOracle {
    embedder: ToyEmbedder,
    identity: Vec<f64>,
}

impl ToyOracle {
    pub fn new(seed: u64, embedder: ToyEmbedder) -> Self {
        let mut rng = SeededRng::new(seed).fork("oracle/identity");
        let s = 1.0 / (POOLED_LEN as f64).sqrt();
        Self {
            embedder,
            identity: rng
                .normal_vec(IDENTITY_WIDTH * POOLED_LEN)
                .into_iter()
                .map(|v| v * s)
                .collect(),
        }
    }
}

fn box_blur(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    s += values[yy * w + xx];
                }
            }
            out[y * w + x] = s / 9.0;
        }
    }
    out
}

fn box_blur_backward(grad: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x] / 9.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    out[yy * w + xx] += g;
                }
            }
        }
    }
    out
}

impl PerceptualOracle for ToyOracle {
    fn perceptual_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)> {
        a.check_same_shape(b)?;
        let fa = self.embedder.features(a)?;
        let fb = self.embedder.features(b)?;
        let n = fa.len() as f64;
        let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
        let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let g: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
        Ok((value, self.embedder.features_backward(a, &g)))
    }

    fn identity_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)> {
        a.check_same_shape(b)?;
        let ua = matvec(&self.identity, POOLED_LEN, &pool(a)?);
        let ub = matvec(&self.identity, POOLED_LEN, &pool(b)?);
        let na = ua.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = ub.iter().map(|v| v * v).sum::<f64>().sqrt();
        let zero = Image::filled(a.height(), a.width(), a.channels(), 0.0);
        if na < 1e-12 || nb < 1e-12 {
            let same = na < 1e-12 && nb < 1e-12;
            return Ok((if same { 1.0 } else { 0.0 }, zero));
        }
        let cos =
            (ua.iter().zip(&ub).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
        let du: Vec<f64> = ua
            .iter()
            .zip(&ub)
            .map(|(x, y)| (y / nb - cos * x / na) / na)
            .collect();
        Ok((
            cos,
            pool_backward(a.shape(), &matvec_t(&self.identity, POOLED_LEN, &du)),
        ))
    }

    fn depth_map(&self, image: &Image) -> Vec<f64> {
        box_blur(&image.luminance(), image.height(), image.width())
    }

    fn depth_loss_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)> {
        a.check_same_shape(b)?;
        let (h, w, c) = a.shape();
        let da = self.depth_map(a);
        let db = self.depth_map(b);
        let n = da.len() as f64;
        let mut value = 0.0;
        let mut g = Vec::with_capacity(da.len());
        for (x, y) in da.iter().zip(&db) {
            value += (x - y) * (x - y);
            g.push(2.0 * (x - y) / n);
        }
        let gl = box_blur_backward(&g, h, w);
        let mut out = Image::filled(h, w, c, 0.0);
        for (px, gv) in out.data_mut().chunks_exact_mut(c).zip(&gl) {
            for (ch, v) in px.iter_mut().enumerate() {
                *v = gv * LUMA.get(ch).copied().unwrap_or(0.0);
            }
        }
        Ok((value / n, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn self_distances_vanish() {
        let o = oracle();
        let a = random_image(1, 16);
        assert_eq!(o.perceptual(&a, &a).unwrap(), 0.0);
        assert_eq!(o.pixel_l2(&a, &a).unwrap(), 0.0);
        assert!((o.identity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(o.depth_loss_grad(&a, &a).unwrap().0, 0.0);
    }

    #[test]
    fn distances_are_nonnegative_and_identity_bounded() {
        let o = oracle();
        for s in 0..5 {
            let a = random_image(2 * s, 16);
            let b = random_image(2 * s + 1, 16);
            assert!(o.perceptual(&a, &b).unwrap() > 0.0);
            let id = o.identity(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&id));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let o = oracle();
        let a = random_image(5, 8);
        let b = random_image(6, 8);
        type F = fn(&ToyOracle, &Image, &Image) -> Result<(f64, Image)>;
        let terms: [(&str, F); 4] = [
            ("pixel", |o, a, b| o.pixel_l2_grad(a, b)),
            ("perceptual", |o, a, b| o.perceptual_grad(a, b)),
            ("identity", |o, a, b| o.identity_grad(a, b)),
            ("depth", |o, a, b| o.depth_loss_grad(a, b)),
        ];
        for (name, f) in terms {
            let (_, g) = f(&o, &a, &b).unwrap();
            for i in [0, 31, 95, 150, 191] {
                let h = 1e-6;
                let mut p = a.clone();
                p.data_mut()[i] += h;
                let mut m = a.clone();
                m.data_mut()[i] -= h;
                let fd = (f(&o, &p, &b).unwrap().0 - f(&o, &m, &b).unwrap().0) / (2.0 * h);
                let an = g.data()[i];
                assert!(
                    (an - fd).abs() <= 1e-3 * fd.abs().max(1e-6),
                    "{name}[{i}]: {an} vs {fd}"
                );
            }
        }
    }
}
