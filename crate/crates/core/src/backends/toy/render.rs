//! Procedural face renderer shared by the toy 2D and 3D generators.
//!
//! A smooth elliptical face mask carries a field of Gaussian blobs whose
//! per-blob features come from the latent. Yaw translates and shears the
//! face horizontally, pitch translates it vertically. The decoder maps blob
//! features to colour and the superresolution stage applies a per-channel
//! gain and bias before the output sigmoid:
//!
//! ```text
//! F_j   = sum_k h[k, j] * blob_k(u, v)
//! col_c = sum_j D[c, j] * F_j + d_c
//! pre_c = m(u, v) * col_c + (1 - m(u, v)) * BACKGROUND
//! out_c = sigmoid(gain_c * pre_c + bias_c)
//! ```

use crate::image::Image;

pub const CHANNELS: usize = 3;
pub const GRID: usize = 5;
pub const BLOBS: usize = GRID * GRID;
pub const FEATURES: usize = 3;
pub const FEATURE_LEN: usize = BLOBS * FEATURES;
/// `D` (channels x features) followed by `d` (channels).
pub const DECODER_LEN: usize = CHANNELS * FEATURES + CHANNELS;
/// `gain` (channels) followed by `bias` (channels).
pub const SUPERRES_LEN: usize = 2 * CHANNELS;

pub const BACKGROUND: f64 = -1.0;

const SHIFT_X: f64 = 0.5;
const SHEAR: f64 = 0.15;
const SHIFT_Y: f64 = 0.5;
const MASK_AX: f64 = 0.5;
const MASK_AY: f64 = 0.65;
const MASK_SHARPNESS: f64 = 8.0;
const BLOB_SIGMA: f64 = 0.16;
const BLOB_SPAN_U: f64 = 0.36;
const BLOB_SPAN_V: f64 = 0.48;

const DEG: f64 = std::f64::consts::PI / 180.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn blob_center(k: usize) -> (f64, f64) {
    let step = |i: usize, span: f64| -span + 2.0 * span * i as f64 / (GRID - 1) as f64;
    (step(k % GRID, BLOB_SPAN_U), step(k / GRID, BLOB_SPAN_V))
}

pub(crate) fn pixel_coords(row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
    let x = 2.0 * (col as f64 + 0.5) / width as f64 - 1.0;
    let y = 2.0 * (row as f64 + 0.5) / height as f64 - 1.0;
    (x, y)
}

/// Face-frame coordinates of an image point under a yaw/pitch (degrees).
pub(crate) fn face_coords(x: f64, y: f64, yaw: f64, pitch: f64) -> (f64, f64) {
    let sy = (yaw * DEG).sin();
    let sp = (pitch * DEG).sin();
    (x - SHIFT_X * sy - SHEAR * sy * y, y + SHIFT_Y * sp)
}

/// Face mask value and its partials with respect to `(u, v)`.
pub(crate) fn mask(u: f64, v: f64) -> (f64, f64, f64) {
    let q = 1.0 - (u / MASK_AX).powi(2) - (v / MASK_AY).powi(2);
    let m = sigmoid(MASK_SHARPNESS * q);
    let dq = m * (1.0 - m) * MASK_SHARPNESS;
    (
        m,
        dq * (-2.0 * u / (MASK_AX * MASK_AX)),
        dq * (-2.0 * v / (MASK_AY * MASK_AY)),
    )
}

/// Borrowed parameter slices for one render.
#[derive(Clone, Copy)]
pub(crate) struct Kernel<'a> {
    pub features: &'a [f64],
    pub decoder: &'a [f64],
    pub superres: &'a [f64],
}

pub(crate) struct KernelGrads {
    pub features: Vec<f64>,
    pub decoder: Vec<f64>,
    pub superres: Vec<f64>,
    pub yaw: f64,
    pub pitch: f64,
}

struct Pixel {
    m: f64,
    dm_du: f64,
    dm_dv: f64,
    u: f64,
    v: f64,
    blobs: [f64; BLOBS],
    field: [f64; FEATURES],
    colour: [f64; CHANNELS],
    pre: [f64; CHANNELS],
    out: [f64; CHANNELS],
}

impl Kernel<'_> {
    fn pixel(&self, x: f64, y: f64, yaw: f64, pitch: f64) -> Pixel {
        let (u, v) = face_coords(x, y, yaw, pitch);
        let (m, dm_du, dm_dv) = mask(u, v);
        let inv = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
        let mut blobs = [0.0; BLOBS];
        let mut field = [0.0; FEATURES];
        for (k, b) in blobs.iter_mut().enumerate() {
            let (cu, cv) = blob_center(k);
            let r2 = (u - cu).powi(2) + (v - cv).powi(2);
            *b = (-r2 * inv).exp();
            let h = &self.features[k * FEATURES..(k + 1) * FEATURES];
            for j in 0..FEATURES {
                field[j] += h[j] * *b;
            }
        }
        let mut colour = [0.0; CHANNELS];
        let mut pre = [0.0; CHANNELS];
        let mut out = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            let row = &self.decoder[c * FEATURES..(c + 1) * FEATURES];
            colour[c] = row.iter().zip(&field).map(|(d, f)| d * f).sum::<f64>()
                + self.decoder[CHANNELS * FEATURES + c];
            pre[c] = m * colour[c] + (1.0 - m) * BACKGROUND;
            out[c] = sigmoid(self.superres[c] * pre[c] + self.superres[CHANNELS + c]);
        }
        Pixel {
            m,
            dm_du,
            dm_dv,
            u,
            v,
            blobs,
            field,
            colour,
            pre,
            out,
        }
    }

    pub fn render(&self, height: usize, width: usize, yaw: f64, pitch: f64) -> Image {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for row in 0..height {
            for col in 0..width {
                let (x, y) = pixel_coords(row, col, height, width);
                data.extend_from_slice(&self.pixel(x, y, yaw, pitch).out);
            }
        }
        Image::new(height, width, CHANNELS, data).expect("render shape")
    }

    pub fn backward(&self, yaw: f64, pitch: f64, grad: &Image) -> KernelGrads {
        let (height, width, _) = grad.shape();
        let mut g = KernelGrads {
            features: vec![0.0; FEATURE_LEN],
            decoder: vec![0.0; DECODER_LEN],
            superres: vec![0.0; SUPERRES_LEN],
            yaw: 0.0,
            pitch: 0.0,
        };
        let inv_var = 1.0 / (BLOB_SIGMA * BLOB_SIGMA);
        let cyaw = (yaw * DEG).cos();
        let cpitch = (pitch * DEG).cos();
        let gd = grad.data();
        for row in 0..height {
            for col in 0..width {
                let (x, y) = pixel_coords(row, col, height, width);
                let p = self.pixel(x, y, yaw, pitch);
                let base = (row * width + col) * CHANNELS;
                let mut d_field = [0.0; FEATURES];
                let mut d_m = 0.0;
                for c in 0..CHANNELS {
                    let t = gd[base + c] * p.out[c] * (1.0 - p.out[c]);
                    if t == 0.0 {
                        continue;
                    }
                    g.superres[c] += t * p.pre[c];
                    g.superres[CHANNELS + c] += t;
                    let d_pre = t * self.superres[c];
                    let d_col = d_pre * p.m;
                    d_m += d_pre * (p.colour[c] - BACKGROUND);
                    for j in 0..FEATURES {
                        g.decoder[c * FEATURES + j] += d_col * p.field[j];
                        d_field[j] += d_col * self.decoder[c * FEATURES + j];
                    }
                    g.decoder[CHANNELS * FEATURES + c] += d_col;
                }
                let mut d_u = d_m * p.dm_du;
                let mut d_v = d_m * p.dm_dv;
                for k in 0..BLOBS {
                    let b = p.blobs[k];
                    let h = &self.features[k * FEATURES..(k + 1) * FEATURES];
                    let mut d_b = 0.0;
                    for j in 0..FEATURES {
                        g.features[k * FEATURES + j] += d_field[j] * b;
                        d_b += d_field[j] * h[j];
                    }
                    let (cu, cv) = blob_center(k);
                    d_u -= d_b * b * (p.u - cu) * inv_var;
                    d_v -= d_b * b * (p.v - cv) * inv_var;
                }
                g.yaw += d_u * (-(SHIFT_X + SHEAR * y) * cyaw * DEG);
                g.pitch += d_v * (SHIFT_Y * cpitch * DEG);
            }
        }
        g
    }
}

/// Face-mask template for silhouette-based pose fitting.
pub(crate) fn mask_template(height: usize, width: usize, yaw: f64, pitch: f64, out: &mut Vec<f64>) {
    out.clear();
    for row in 0..height {
        for col in 0..width {
            let (x, y) = pixel_coords(row, col, height, width);
            let (u, v) = face_coords(x, y, yaw, pitch);
            out.push(mask(u, v).0);
        }
    }
}
