use crate::backends::{hash_f64, JointEmbedder};
use crate::embedding::{Embedding, DEFAULT_EMBEDDING_WIDTH};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SeededRng;

use super::render;

/// Side length of the average-pooling grid every toy feature starts from.
pub const POOL: usize = 8;
pub const POOLED_LEN: usize = POOL * POOL * render::CHANNELS;

/// Average-pools an image onto a `POOL x POOL` grid, centred on 0.5.
/// Works for any resolution of at least `POOL` pixels per side.
pub(crate) fn pool(image: &Image) -> Result<Vec<f64>> {
    let (h, w, c) = image.shape();
    if c != render::CHANNELS || h < POOL || w < POOL {
        return Err(Error::Dimension(format!(
            "toy features need an RGB image of at least {POOL}x{POOL}, got {h}x{w}x{c}"
        )));
    }
    let mut sums = vec![0.0; POOLED_LEN];
    let mut counts = vec![0usize; POOL * POOL];
    let data = image.data();
    for y in 0..h {
        let cy = y * POOL / h;
        for x in 0..w {
            let cell = cy * POOL + x * POOL / w;
            counts[cell] += 1;
            for ch in 0..c {
                sums[cell * c + ch] += data[(y * w + x) * c + ch];
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        for ch in 0..c {
            sums[cell * c + ch] = sums[cell * c + ch] / n as f64 - 0.5;
        }
    }
    Ok(sums)
}

/// Transpose of [`pool`]: spreads pooled-space gradients back to pixels.
pub(crate) fn pool_backward(shape: (usize, usize, usize), grad: &[f64]) -> Image {
    let (h, w, c) = shape;
    let counts: Vec<usize> = (0..POOL * POOL)
        .map(|cell| {
            let (cy, cx) = (cell / POOL, cell % POOL);
            let rows = (0..h).filter(|y| y * POOL / h == cy).count();
            let cols = (0..w).filter(|x| x * POOL / w == cx).count();
            rows * cols
        })
        .collect();
    let mut out = Image::filled(h, w, c, 0.0);
    let data = out.data_mut();
    for y in 0..h {
        let cy = y * POOL / h;
        for x in 0..w {
            let cell = cy * POOL + x * POOL / w;
            let n = counts[cell] as f64;
            for ch in 0..c {
                data[(y * w + x) * c + ch] = grad[cell * c + ch] / n;
            }
        }
    }
    out
}

pub(crate) fn matvec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub(crate) fn matvec_t(m: &[f64], cols: usize, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (row, gi) in m.chunks_exact(cols).zip(g) {
        out.iter_mut().zip(row).for_each(|(o, a)| *o += gi * a);
    }
    out
}

/// Words with no visual content of their own.
const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "with", "and", "style", "wearing", "portrait", "photo", "face",
    "person", "man", "woman", "image", "picture", "drawing", "3d", "render", "by",
];

/// Style words and the colour tint each adds to the face region.
const STYLE_WORDS: &[(&str, [f64; 3])] = &[
    ("sketch", [0.25, 0.35, 0.45]),
    ("pencil", [0.2, 0.3, 0.4]),
    ("painting", [0.1, -0.05, -0.2]),
    ("oil", [0.05, -0.1, -0.25]),
    ("watercolor", [-0.1, 0.1, 0.3]),
    ("cartoon", [0.15, 0.05, -0.1]),
    ("anime", [0.1, 0.0, 0.15]),
    ("pixar", [0.12, 0.08, 0.0]),
    ("disney", [0.1, 0.1, 0.05]),
    ("comic", [0.2, -0.1, -0.1]),
    ("pop", [0.3, -0.2, 0.2]),
    ("art", [0.05, 0.05, 0.05]),
    ("zombie", [-0.3, 0.15, -0.15]),
    ("elf", [-0.05, 0.1, -0.05]),
    ("werewolf", [-0.15, -0.2, -0.25]),
    ("vampire", [0.05, -0.35, -0.3]),
    ("statue", [-0.1, 0.05, 0.2]),
    ("bronze", [0.0, -0.15, -0.3]),
    ("golden", [0.15, 0.1, -0.3]),
    ("marble", [0.05, 0.2, 0.35]),
    ("blue", [-0.3, -0.1, 0.4]),
    ("red", [0.35, -0.2, -0.2]),
    ("green", [-0.25, 0.3, -0.15]),
    ("purple", [0.1, -0.3, 0.35]),
    ("dark", [-0.3, -0.3, -0.3]),
    ("bright", [0.25, 0.25, 0.25]),
    ("pale", [0.1, 0.2, 0.25]),
    ("tanned", [0.05, -0.1, -0.2]),
    ("old", [-0.05, -0.05, 0.0]),
    ("young", [0.05, 0.05, 0.0]),
];

/// Words that add a localized band (row of the pooling grid, darkness).
const FEATURE_WORDS: &[(&str, usize, f64)] = &[
    ("glasses", 3, -0.35),
    ("sunglasses", 3, -0.5),
    ("beard", 6, -0.3),
    ("mustache", 5, -0.25),
    ("smile", 5, 0.2),
    ("smiling", 5, 0.2),
    ("hat", 0, -0.3),
    ("makeup", 4, 0.15),
    ("freckles", 4, -0.1),
];

/// Toy joint image-text embedder: a frozen random projection of pooled
/// pixels. Text maps each vocabulary word to a pattern in pooled-pixel
/// space, so text and image embeddings share one geometry.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    width: usize,
    projection: Vec<f64>,
    /// Pooled-space layout of a plain frontal photo portrait.
    photo_layout: Vec<f64>,
}

impl ToyEmbedder {
    pub fn new(seed: u64) -> Self {
        Self::with_width(seed, DEFAULT_EMBEDDING_WIDTH)
    }

    pub fn with_width(seed: u64, width: usize) -> Self {
        let mut rng = SeededRng::new(seed).fork("embed/image");
        let s = 1.0 / (POOLED_LEN as f64).sqrt();
        let projection = rng
            .normal_vec(width * POOLED_LEN)
            .into_iter()
            .map(|v| v * s)
            .collect();
        Self {
            width,
            projection,
            photo_layout: photo_layout(),
        }
    }

    /// Unnormalized features `P (pool(image) - 0.5)`.
    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(matvec(&self.projection, POOLED_LEN, &pool(image)?))
    }

    /// Vector-Jacobian product of [`features`](Self::features).
    pub fn features_backward(&self, image: &Image, grad: &[f64]) -> Image {
        pool_backward(image.shape(), &matvec_t(&self.projection, POOLED_LEN, grad))
    }

    pub fn vocabulary() -> impl Iterator<Item = &'static str> {
        FUNCTION_WORDS
            .iter()
            .copied()
            .chain(STYLE_WORDS.iter().map(|(w, _)| *w))
            .chain(FEATURE_WORDS.iter().map(|(w, _, _)| *w))
    }

    fn text_layout(&self, text: &str) -> Result<Vec<f64>> {
        let mut x = self.photo_layout.clone();
        let tokens: Vec<String> = text
            .split(|c: char| c.is_whitespace() || matches!(c, ',' | '.' | ';' | ':' | '!' | '?'))
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            return Err(Error::Config("empty text prompt".into()));
        }
        for t in &tokens {
            if FUNCTION_WORDS.contains(&t.as_str()) {
                continue;
            }
            if let Some((_, tint)) = STYLE_WORDS.iter().find(|(w, _)| w == t) {
                apply_tint(&mut x, tint);
            } else if let Some((_, row, amount)) = FEATURE_WORDS.iter().find(|(w, _, _)| w == t) {
                apply_band(&mut x, *row, *amount);
            } else {
                return Err(Error::Vocabulary(t.clone()));
            }
        }
        Ok(x)
    }
}

fn face_cells() -> Vec<f64> {
    // fraction of each pooling cell covered by the frontal face mask
    let res = 32;
    let mut template = Vec::new();
    render::mask_template(res, res, 0.0, 0.0, &mut template);
    let mut cover = vec![0.0; POOL * POOL];
    for y in 0..res {
        for x in 0..res {
            cover[(y * POOL / res) * POOL + x * POOL / res] += template[y * res + x];
        }
    }
    let per_cell = (res / POOL * res / POOL) as f64;
    cover.iter_mut().for_each(|v| *v /= per_cell);
    cover
}

fn photo_layout() -> Vec<f64> {
    let skin = [0.77, 0.62, 0.55];
    let background = 0.27;
    let mut x = vec![0.0; POOLED_LEN];
    for (cell, m) in face_cells().into_iter().enumerate() {
        for c in 0..render::CHANNELS {
            x[cell * render::CHANNELS + c] = m * skin[c] + (1.0 - m) * background - 0.5;
        }
    }
    x
}

fn apply_tint(x: &mut [f64], tint: &[f64; 3]) {
    for (cell, m) in face_cells().into_iter().enumerate() {
        for c in 0..render::CHANNELS {
            x[cell * render::CHANNELS + c] += m * tint[c];
        }
    }
}

fn apply_band(x: &mut [f64], row: usize, amount: f64) {
    let cover = face_cells();
    for col in 0..POOL {
        let cell = row * POOL + col;
        for c in 0..render::CHANNELS {
            x[cell * render::CHANNELS + c] += cover[cell] * amount;
        }
    }
}

/// Jacobian-vector back-product of `y -> y / |y|`.
pub(crate) fn normalize_backward(y: &[f64], grad: &[f64]) -> Vec<f64> {
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let e_dot_g: f64 = y.iter().zip(grad).map(|(a, b)| a * b).sum::<f64>() / n;
    y.iter()
        .zip(grad)
        .map(|(yi, gi)| (gi - e_dot_g * yi / n) / n)
        .collect()
}

impl JointEmbedder for ToyEmbedder {
    fn width(&self) -> usize {
        self.width
    }

    fn embed_image(&self, image: &Image) -> Result<Embedding> {
        Embedding::unit(self.features(image)?)
    }

    fn embed_image_backward(&self, image: &Image, grad: &[f64]) -> Result<Image> {
        if grad.len() != self.width {
            return Err(Error::Dimension(format!(
                "embedding gradient has width {}, expected {}",
                grad.len(),
                self.width
            )));
        }
        let y = self.features(image)?;
        Ok(self.features_backward(image, &normalize_backward(&y, grad)))
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        Embedding::unit(matvec(
            &self.projection,
            POOLED_LEN,
            &self.text_layout(text)?,
        ))
    }

    fn param_hash(&self) -> String {
        let mut all = self.projection.clone();
        all.extend_from_slice(&self.photo_layout);
        hash_f64(&all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64, size: usize) -> Image {
        let mut rng = SeededRng::new(seed);
        let data = (0..size * size * 3)
            .map(|_| rng.uniform(0.0, 1.0))
            .collect();
        Image::new(size, size, 3, data).unwrap()
    }

    #[test]
    fn embeddings_are_unit_and_frozen() {
        let e = ToyEmbedder::new(1);
        let img = random_image(3, 16);
        let a = e.embed_image(&img).unwrap();
        let b = e.embed_image(&img).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a, b);
        let t = e.embed_text("a portrait, wearing glasses").unwrap();
        assert!((t.norm() - 1.0).abs() < 1e-6);
        assert_eq!(e.param_hash(), ToyEmbedder::new(1).param_hash());
        assert_ne!(e.param_hash(), ToyEmbedder::new(2).param_hash());
    }

    #[test]
    fn independent_images_are_not_parallel() {
        let e = ToyEmbedder::new(1);
        for s in 0..10 {
            let a = e.embed_image(&random_image(2 * s, 16)).unwrap();
            let b = e.embed_image(&random_image(2 * s + 1, 16)).unwrap();
            assert!(a.cosine(&b).unwrap() < 1.0);
        }
    }

    #[test]
    fn unknown_token_is_vocabulary_error() {
        let e = ToyEmbedder::new(1);
        assert!(matches!(
            e.embed_text("a xylophone"),
            Err(Error::Vocabulary(_))
        ));
        assert!(matches!(e.embed_text("  "), Err(Error::Config(_))));
        for w in ToyEmbedder::vocabulary() {
            e.embed_text(w).unwrap();
        }
    }

    #[test]
    fn style_words_move_away_from_photo() {
        let e = ToyEmbedder::new(1);
        let photo = e.embed_text("photo").unwrap();
        assert_eq!(photo, e.embed_text("a portrait photo").unwrap());
        let sketch = e.embed_text("sketch").unwrap();
        assert!(photo.cosine(&sketch).unwrap() < 0.999);
    }

    #[test]
    fn pooling_handles_uneven_sizes() {
        let img = random_image(5, 13);
        let p = pool(&img).unwrap();
        let total: f64 = img.data().iter().sum::<f64>() / img.len() as f64 - 0.5;
        assert_eq!(p.len(), POOLED_LEN);
        let g = pool_backward(img.shape(), &vec![1.0; POOLED_LEN]);
        // every pixel receives 1 / (its cell size), so the sum is the cell count per channel
        let s: f64 = g.data().iter().sum();
        assert!((s - (POOL * POOL * 3) as f64).abs() < 1e-9);
        assert!(total.is_finite());
    }

    #[test]
    fn image_backward_matches_finite_differences() {
        let e = ToyEmbedder::with_width(4, 64);
        let img = random_image(7, 8);
        let g = SeededRng::new(8).normal_vec(64);
        let f = |im: &Image| -> f64 {
            e.embed_image(im)
                .unwrap()
                .values()
                .iter()
                .zip(&g)
                .map(|(a, b)| a * b)
                .sum()
        };
        let an = e.embed_image_backward(&img, &g).unwrap();
        let h = 1e-6;
        for i in [0, 17, 100, 191] {
            let mut p = img.clone();
            p.data_mut()[i] += h;
            let mut m = img.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let a = an.data()[i];
            assert!(
                (a - fd).abs() <= 1e-4 * fd.abs().max(1e-6),
                "{i}: {a} vs {fd}"
            );
        }
    }
}
