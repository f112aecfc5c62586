use crate::backends::{Generator2D, Generator3D, GeneratorGrads, GradRequest, ParamSet, Submodule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentCode;
use crate::pose::CameraPose;
use crate::rng::SeededRng;

use super::render::{self, Kernel, DECODER_LEN, FEATURE_LEN, SUPERRES_LEN};

pub const LAYERS_3D: usize = 14;
pub const LAYERS_2D: usize = 18;
pub const STYLE_WIDTH: usize = 512;
pub const NOISE_WIDTH: usize = 512;
const MAPPING_HIDDEN: usize = 64;

/// Skin-toned colour bias (pre-sigmoid) of photo-domain renders.
const PHOTO_COLOUR: [f64; 3] = [1.2, 0.5, 0.2];

/// Two-layer mapping network `z -> tanh(M1 z) -> M2 h + b2`.
#[derive(Debug, Clone)]
struct Mapping {
    noise: usize,
    hidden: usize,
    width: usize,
}

impl Mapping {
    fn init(&self, rng: &mut SeededRng) -> Vec<f64> {
        let mut p = rng.normal_vec(self.hidden * self.noise);
        p.extend(std::iter::repeat_n(0.0, self.hidden));
        p.extend(rng.normal_vec(self.width * self.hidden));
        p.extend(rng.normal_vec(self.width).into_iter().map(|v| 0.5 * v));
        p
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (m1, rest) = p.split_at(self.hidden * self.noise);
        let (b1, rest) = rest.split_at(self.hidden);
        let (m2, b2) = rest.split_at(self.width * self.hidden);
        (m1, b1, m2, b2)
    }

    fn hidden(&self, p: &[f64], z: &[f64]) -> Vec<f64> {
        let (m1, b1, _, _) = self.split(p);
        let s = 1.0 / (self.noise as f64).sqrt();
        m1.chunks_exact(self.noise)
            .zip(b1)
            .map(|(row, b)| (dot(row, z) * s + b).tanh())
            .collect()
    }

    fn forward(&self, p: &[f64], z: &[f64]) -> Vec<f64> {
        let h = self.hidden(p, z);
        let (_, _, m2, b2) = self.split(p);
        let s = 1.0 / (self.hidden as f64).sqrt();
        m2.chunks_exact(self.hidden)
            .zip(b2)
            .map(|(row, b)| dot(row, &h) * s + b)
            .collect()
    }

    fn backward(&self, p: &[f64], z: &[f64], grad_style: &[f64], out: &mut [f64]) {
        let h = self.hidden(p, z);
        let (_, _, m2, _) = self.split(p);
        let s2 = 1.0 / (self.hidden as f64).sqrt();
        let s1 = 1.0 / (self.noise as f64).sqrt();
        let (o_m1, rest) = out.split_at_mut(self.hidden * self.noise);
        let (o_b1, rest) = rest.split_at_mut(self.hidden);
        let (o_m2, o_b2) = rest.split_at_mut(self.width * self.hidden);
        let mut d_h = vec![0.0; self.hidden];
        for (r, &g) in grad_style.iter().enumerate() {
            o_b2[r] += g;
            let row = &m2[r * self.hidden..(r + 1) * self.hidden];
            let o_row = &mut o_m2[r * self.hidden..(r + 1) * self.hidden];
            for c in 0..self.hidden {
                o_row[c] += g * h[c] * s2;
                d_h[c] += g * row[c] * s2;
            }
        }
        for c in 0..self.hidden {
            let d_a = d_h[c] * (1.0 - h[c] * h[c]);
            o_b1[c] += d_a;
            let o_row = &mut o_m1[c * self.noise..(c + 1) * self.noise];
            for (o, zi) in o_row.iter_mut().zip(z) {
                *o += d_a * zi * s1;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Latent-to-feature projection `h = tanh(A vec(W) / sqrt(n) + b)`.
fn synthesis_features(params: &[f64], w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let s = 1.0 / (n as f64).sqrt();
    let (a, b) = params.split_at(FEATURE_LEN * n);
    a.chunks_exact(n)
        .zip(b)
        .map(|(row, bias)| (dot(row, w) * s + bias).tanh())
        .collect()
}

/// Deterministic toy stand-in for a tri-plane 3D generator.
#[derive(Debug, Clone)]
pub struct ToyGenerator3D {
    height: usize,
    width: usize,
    mapping: Mapping,
    params: ParamSet,
}

impl ToyGenerator3D {
    pub fn new(seed: u64, resolution: usize) -> Self {
        let root = SeededRng::new(seed);
        let mapping = Mapping {
            noise: NOISE_WIDTH,
            hidden: MAPPING_HIDDEN,
            width: STYLE_WIDTH,
        };
        let n = LAYERS_3D * STYLE_WIDTH;
        let mut rng = root.fork("g3d/synthesis");
        let mut synthesis = rng.normal_vec(FEATURE_LEN * n);
        synthesis.extend(rng.normal_vec(FEATURE_LEN).into_iter().map(|v| 0.3 * v));
        let map_params = mapping.init(&mut root.fork("g3d/mapping"));
        let mut rng = root.fork("g3d/decoder");
        let mut decoder: Vec<f64> = rng
            .normal_vec(DECODER_LEN - 3)
            .into_iter()
            .map(|v| 0.25 * v)
            .collect();
        decoder.extend_from_slice(&PHOTO_COLOUR);
        let superres = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        debug_assert_eq!(superres.len(), SUPERRES_LEN);
        Self {
            height: resolution,
            width: resolution,
            mapping,
            params: ParamSet::new(synthesis, map_params, superres, decoder),
        }
    }

    /// Copy with an artistic colour treatment: stronger, shifted decoder
    /// colours and higher output contrast. Latent space and geometry are
    /// unchanged, so renders stay pose-aligned with the photo generator.
    pub fn stylized(&self, seed: u64) -> Self {
        let mut out = self.clone();
        let mut rng = SeededRng::new(seed).fork("g3d/stylize");
        let dec = out.params.get_mut(Submodule::Decoder);
        for v in dec.iter_mut().take(DECODER_LEN - 3) {
            *v = 1.8 * *v + 0.15 * rng.standard_normal();
        }
        for v in dec.iter_mut().skip(DECODER_LEN - 3) {
            *v += 0.4 * rng.standard_normal();
        }
        let sr = out.params.get_mut(Submodule::Superresolution);
        for g in sr.iter_mut().take(3) {
            *g = 1.4;
        }
        out
    }

    fn check_latent(&self, w: &LatentCode) -> Result<()> {
        if w.layers() != LAYERS_3D || w.width() != STYLE_WIDTH {
            return Err(Error::Dimension(format!(
                "toy 3D generator expects a {LAYERS_3D}x{STYLE_WIDTH} latent, got {}x{}",
                w.layers(),
                w.width()
            )));
        }
        Ok(())
    }

    fn kernel<'a>(&'a self, features: &'a [f64]) -> Kernel<'a> {
        Kernel {
            features,
            decoder: self.params.get(Submodule::Decoder),
            superres: self.params.get(Submodule::Superresolution),
        }
    }
}

impl Generator3D for ToyGenerator3D {
    fn latent_shape(&self) -> (usize, usize) {
        (LAYERS_3D, STYLE_WIDTH)
    }

    fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn noise_width(&self) -> usize {
        NOISE_WIDTH
    }

    fn map_noise(&self, z: &[f64]) -> Vec<f64> {
        self.mapping.forward(self.params.get(Submodule::Mapping), z)
    }

    fn map_noise_backward(&self, z: &[f64], grad_style: &[f64], grads: &mut ParamSet) {
        let p = self.params.get(Submodule::Mapping);
        let out = grads.get_mut(Submodule::Mapping);
        if out.len() != p.len() {
            *out = vec![0.0; p.len()];
        }
        self.mapping.backward(p, z, grad_style, out);
    }

    fn generate(&self, w: &LatentCode, pose: &CameraPose) -> Result<Image> {
        self.check_latent(w)?;
        let h = synthesis_features(self.params.get(Submodule::Synthesis), w.values());
        Ok(self
            .kernel(&h)
            .render(self.height, self.width, pose.yaw(), pose.pitch()))
    }

    fn backward(
        &self,
        w: &LatentCode,
        pose: &CameraPose,
        grad_image: &Image,
        request: GradRequest,
    ) -> Result<GeneratorGrads> {
        self.check_latent(w)?;
        if grad_image.shape() != (self.height, self.width, render::CHANNELS) {
            return Err(Error::Dimension(format!(
                "gradient image {:?} does not match render shape",
                grad_image.shape()
            )));
        }
        let syn = self.params.get(Submodule::Synthesis);
        let wv = w.values();
        let n = wv.len();
        let s = 1.0 / (n as f64).sqrt();
        let h = synthesis_features(syn, wv);
        let kg = self
            .kernel(&h)
            .backward(pose.yaw(), pose.pitch(), grad_image);

        let d_pre: Vec<f64> = kg
            .features
            .iter()
            .zip(&h)
            .map(|(g, hv)| g * (1.0 - hv * hv))
            .collect();

        let latent = request.latent.then(|| {
            let mut gw = vec![0.0; n];
            for (r, &d) in d_pre.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &syn[r * n..(r + 1) * n];
                let f = d * s;
                gw.iter_mut().zip(row).for_each(|(g, a)| *g += f * a);
            }
            gw
        });

        let params = request.params.then(|| {
            let mut grads = ParamSet::zeros_like(&self.params);
            let gs = grads.get_mut(Submodule::Synthesis);
            for (r, &d) in d_pre.iter().enumerate() {
                let f = d * s;
                gs[r * n..(r + 1) * n]
                    .iter_mut()
                    .zip(wv)
                    .for_each(|(g, x)| *g = f * x);
                gs[FEATURE_LEN * n + r] = d;
            }
            *grads.get_mut(Submodule::Decoder) = kg.decoder.clone();
            *grads.get_mut(Submodule::Superresolution) = kg.superres.clone();
            grads
        });

        let (yaw, pitch) = if request.pose {
            (kg.yaw, kg.pitch)
        } else {
            (0.0, 0.0)
        };
        Ok(GeneratorGrads {
            latent,
            yaw,
            pitch,
            params,
        })
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn clone_box(&self) -> Box<dyn Generator3D> {
        Box::new(self.clone())
    }
}

/// Coarse layers whose mean encodes head pose in the toy 2D generator.
pub const POSE_LAYERS: std::ops::RangeInclusive<usize> = 1..=4;
pub const YAW_LIMIT: f64 = 80.0;
pub const PITCH_LIMIT: f64 = 60.0;

/// Toy 2D style generator producing aligned photo-domain portraits. Head
/// pose is read from the coarse layers, appearance from all layers.
#[derive(Debug, Clone)]
pub struct ToyGenerator2D {
    height: usize,
    width: usize,
    mapping: Mapping,
    mapping_params: Vec<f64>,
    synthesis: Vec<f64>,
    decoder: Vec<f64>,
    superres: Vec<f64>,
    yaw_axis: Vec<f64>,
    pitch_axis: Vec<f64>,
}

impl ToyGenerator2D {
    pub fn new(seed: u64, resolution: usize) -> Self {
        let root = SeededRng::new(seed);
        let mapping = Mapping {
            noise: NOISE_WIDTH,
            hidden: MAPPING_HIDDEN,
            width: STYLE_WIDTH,
        };
        let mapping_params = mapping.init(&mut root.fork("g2d/mapping"));
        let n = LAYERS_2D * STYLE_WIDTH;
        let mut rng = root.fork("g2d/synthesis");
        let mut synthesis = rng.normal_vec(FEATURE_LEN * n);
        synthesis.extend(rng.normal_vec(FEATURE_LEN).into_iter().map(|v| 0.3 * v));
        let mut rng = root.fork("g2d/decoder");
        // Low-variance colours keep photo renders close to uniform skin.
        let mut decoder: Vec<f64> = rng
            .normal_vec(DECODER_LEN - 3)
            .into_iter()
            .map(|v| 0.08 * v)
            .collect();
        decoder.extend_from_slice(&PHOTO_COLOUR);
        let mut rng = root.fork("g2d/pose");
        let mut yaw_axis = rng.normal_vec(STYLE_WIDTH);
        normalize(&mut yaw_axis);
        let mut pitch_axis = rng.normal_vec(STYLE_WIDTH);
        let proj = dot(&pitch_axis, &yaw_axis);
        pitch_axis
            .iter_mut()
            .zip(&yaw_axis)
            .for_each(|(p, y)| *p -= proj * y);
        normalize(&mut pitch_axis);
        Self {
            height: resolution,
            width: resolution,
            mapping,
            mapping_params,
            synthesis,
            decoder,
            superres: vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            yaw_axis,
            pitch_axis,
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn coarse_mean(w: &LatentCode) -> Vec<f64> {
        let mut c = vec![0.0; w.width()];
        for l in POSE_LAYERS {
            c.iter_mut().zip(w.layer(l)).for_each(|(a, v)| *a += v);
        }
        let k = POSE_LAYERS.count() as f64;
        c.iter_mut().for_each(|a| *a /= k);
        c
    }

    /// Head pose (yaw, pitch) in degrees encoded by a 2D latent.
    pub fn pose_of(&self, w: &LatentCode) -> (f64, f64) {
        let c = Self::coarse_mean(w);
        (
            YAW_LIMIT * dot(&self.yaw_axis, &c).tanh(),
            PITCH_LIMIT * dot(&self.pitch_axis, &c).tanh(),
        )
    }

    /// Moves the coarse layers of `w` so that it encodes the given pose.
    pub fn set_pose(&self, w: &mut LatentCode, yaw: f64, pitch: f64) {
        let c = Self::coarse_mean(w);
        let target_y = (yaw / YAW_LIMIT).clamp(-0.999, 0.999).atanh();
        let target_p = (pitch / PITCH_LIMIT).clamp(-0.999, 0.999).atanh();
        let dy = target_y - dot(&self.yaw_axis, &c);
        let dp = target_p - dot(&self.pitch_axis, &c);
        let width = w.width();
        let values = w.values_mut();
        for l in POSE_LAYERS {
            let row = &mut values[(l - 1) * width..l * width];
            for ((v, ay), ap) in row.iter_mut().zip(&self.yaw_axis).zip(&self.pitch_axis) {
                *v += dy * ay + dp * ap;
            }
        }
    }

    pub fn mean_latent(&self, samples: usize, rng: &mut SeededRng) -> LatentCode {
        let mut acc = vec![0.0; STYLE_WIDTH];
        for _ in 0..samples.max(1) {
            let z = rng.normal_vec(NOISE_WIDTH);
            acc.iter_mut()
                .zip(self.map_noise(&z))
                .for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= samples.max(1) as f64);
        LatentCode::broadcast(&acc, LAYERS_2D)
    }
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

impl Generator2D for ToyGenerator2D {
    fn latent_shape(&self) -> (usize, usize) {
        (LAYERS_2D, STYLE_WIDTH)
    }

    fn noise_width(&self) -> usize {
        NOISE_WIDTH
    }

    fn map_noise(&self, z: &[f64]) -> Vec<f64> {
        self.mapping.forward(&self.mapping_params, z)
    }

    fn generate(&self, w: &LatentCode) -> Result<Image> {
        if w.layers() != LAYERS_2D || w.width() != STYLE_WIDTH {
            return Err(Error::Dimension(format!(
                "toy 2D generator expects a {LAYERS_2D}x{STYLE_WIDTH} latent, got {}x{}",
                w.layers(),
                w.width()
            )));
        }
        let (yaw, pitch) = self.pose_of(w);
        let h = synthesis_features(&self.synthesis, w.values());
        let kernel = Kernel {
            features: &h,
            decoder: &self.decoder,
            superres: &self.superres,
        };
        Ok(kernel.render(self.height, self.width, yaw, pitch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mean_latent;
    use crate::pose::canonical_pose;

    fn small() -> ToyGenerator3D {
        ToyGenerator3D::new(3, 16)
    }

    fn random_latent(g: &ToyGenerator3D, seed: u64) -> LatentCode {
        let mut rng = SeededRng::new(seed);
        let mut w = crate::backends::mapped_noise_latent(g, &rng.normal_vec(NOISE_WIDTH));
        for v in w.values_mut() {
            *v += 0.3 * rng.standard_normal();
        }
        w
    }

    /// Scalar objective: weighted pixel sum with fixed random weights.
    fn objective(img: &Image, weights: &[f64]) -> f64 {
        img.data().iter().zip(weights).map(|(a, b)| a * b).sum()
    }

    fn weights(n: usize) -> Vec<f64> {
        SeededRng::new(99).normal_vec(n)
    }

    #[test]
    fn output_is_in_unit_range_and_deterministic() {
        let g = small();
        let w = random_latent(&g, 1);
        let a = g.generate(&w, &canonical_pose()).unwrap();
        let b = g.generate(&w, &canonical_pose()).unwrap();
        assert!(a.in_unit_range());
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_layer_count_is_dimension_error() {
        let g = small();
        let w = LatentCode::zeros(18, STYLE_WIDTH);
        assert!(matches!(
            g.generate(&w, &canonical_pose()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pose_gradients_match_finite_differences() {
        let g = small();
        let w = random_latent(&g, 2);
        let (yaw, pitch) = (17.0, -8.0);
        let pose = CameraPose::from_yaw_pitch(yaw, pitch);
        let img = g.generate(&w, &pose).unwrap();
        let wt = weights(img.len());
        let grad = Image::new(16, 16, 3, wt.clone()).unwrap();
        let gr = g.backward(&w, &pose, &grad, GradRequest::ALL).unwrap();
        let h = 1e-4;
        let f = |y: f64, p: f64| {
            objective(
                &g.generate(&w, &CameraPose::from_yaw_pitch(y, p)).unwrap(),
                &wt,
            )
        };
        let fd_yaw = (f(yaw + h, pitch) - f(yaw - h, pitch)) / (2.0 * h);
        let fd_pitch = (f(yaw, pitch + h) - f(yaw, pitch - h)) / (2.0 * h);
        assert!(
            (gr.yaw - fd_yaw).abs() <= 1e-5 * fd_yaw.abs().max(1e-3),
            "{} vs {}",
            gr.yaw,
            fd_yaw
        );
        assert!(
            (gr.pitch - fd_pitch).abs() <= 1e-5 * fd_pitch.abs().max(1e-3),
            "{} vs {}",
            gr.pitch,
            fd_pitch
        );
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let g = small();
        let w = random_latent(&g, 4);
        let pose = CameraPose::from_yaw_pitch(-12.0, 6.0);
        let wt = weights(16 * 16 * 3);
        let grad = Image::new(16, 16, 3, wt.clone()).unwrap();
        let gr = g.backward(&w, &pose, &grad, GradRequest::ALL).unwrap();
        let pg = gr.params.unwrap();
        let n = LAYERS_3D * STYLE_WIDTH;
        let probes = [
            (Submodule::Synthesis, 5 * n + 17),
            (Submodule::Synthesis, FEATURE_LEN * n + 3),
            (Submodule::Decoder, 4),
            (Submodule::Decoder, DECODER_LEN - 1),
            (Submodule::Superresolution, 1),
            (Submodule::Superresolution, 5),
        ];
        for (m, i) in probes {
            let h = 1e-5;
            let mut gp = g.clone();
            gp.params_mut().get_mut(m)[i] += h;
            let mut gm = g.clone();
            gm.params_mut().get_mut(m)[i] -= h;
            let fd = (objective(&gp.generate(&w, &pose).unwrap(), &wt)
                - objective(&gm.generate(&w, &pose).unwrap(), &wt))
                / (2.0 * h);
            let an = pg.get(m)[i];
            assert!(
                (an - fd).abs() <= 1e-5 * fd.abs().max(1e-4),
                "{m}[{i}]: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn mapping_gradient_matches_finite_differences() {
        let g = small();
        let z = SeededRng::new(8).normal_vec(NOISE_WIDTH);
        let gs = SeededRng::new(9).normal_vec(STYLE_WIDTH);
        let mut grads = ParamSet::zeros_like(g.params());
        g.map_noise_backward(&z, &gs, &mut grads);
        let f = |g: &ToyGenerator3D| dot(&g.map_noise(&z), &gs);
        let len = g.params().get(Submodule::Mapping).len();
        for i in [0, 777, MAPPING_HIDDEN * NOISE_WIDTH + 5, len - 600, len - 1] {
            let h = 1e-6;
            let mut gp = g.clone();
            gp.params_mut().get_mut(Submodule::Mapping)[i] += h;
            let mut gm = g.clone();
            gm.params_mut().get_mut(Submodule::Mapping)[i] -= h;
            let fd = (f(&gp) - f(&gm)) / (2.0 * h);
            let an = grads.get(Submodule::Mapping)[i];
            assert!(
                (an - fd).abs() <= 1e-6 * fd.abs().max(1e-3),
                "mapping[{i}]: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn mean_latent_is_broadcast() {
        let g = small();
        let m = mean_latent(&g, 200, &mut SeededRng::new(0));
        assert_eq!(m.layers(), LAYERS_3D);
        assert_eq!(m.layer(1), m.layer(14));
    }

    #[test]
    fn pose_axes_round_trip_in_2d() {
        let g2 = ToyGenerator2D::new(5, 16);
        let mut w = g2.mean_latent(100, &mut SeededRng::new(1));
        g2.set_pose(&mut w, 23.0, -11.0);
        let (y, p) = g2.pose_of(&w);
        assert!((y - 23.0).abs() < 1e-9 && (p + 11.0).abs() < 1e-9);
        // fine layers never move the pose
        let mut w2 = w.clone();
        let width = w2.width();
        for v in &mut w2.values_mut()[12 * width..] {
            *v += 1.0;
        }
        assert_eq!(g2.pose_of(&w2), g2.pose_of(&w));
    }
}
