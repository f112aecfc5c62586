//! Multi-view image-text fusion in the joint embedding space, gated per
//! step between the image-guided and the text-guided direction.

use serde::{Deserialize, Serialize};

use crate::backends::{Generator3D, JointEmbedder};
use crate::embedding::{check_width, Embedding};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentCode;
use crate::pose::{canonical_pose, sample_multiview_poses, AngleRange, CameraPose};
use crate::rng::SeededRng;

/// Directions shorter than this are treated as undefined.
pub const MIN_DIRECTION_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceReduction {
    /// Mean L2 distance between unit embeddings, in `[0, 2]`.
    L2,
    /// Mean `1 - cos`, in `[0, 2]`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub tau: f64,
    pub xi: u32,
    pub target_text: String,
    pub source_text: String,
    pub views: usize,
    pub yaw_range: AngleRange,
    pub pitch_range: AngleRange,
    pub distance: DistanceReduction,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            xi: 50,
            target_text: "a sketch portrait".into(),
            source_text: "photo".into(),
            views: 3,
            yaw_range: AngleRange::new(-50.0, 50.0),
            pitch_range: AngleRange::new(-30.0, 30.0),
            distance: DistanceReduction::L2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 2.0) {
            return Err(Error::Config(format!(
                "fusion.tau must lie in (0, 2), got {}",
                self.tau
            )));
        }
        if !(1..=100).contains(&self.xi) {
            return Err(Error::Config(format!(
                "fusion.xi must lie in [1, 100], got {}",
                self.xi
            )));
        }
        if self.views == 0 {
            return Err(Error::Config("fusion.views must be at least 1".into()));
        }
        self.yaw_range.validate("fusion.yaw_range")?;
        self.pitch_range.validate("fusion.pitch_range")
    }
}

/// Per-epoch gate and loss record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionState {
    pub epoch: usize,
    /// Stylization distance `D`.
    pub distance: f64,
    /// The `Rand(1, 100)` draw, present only when `D > tau`.
    pub draw: Option<u32>,
    pub gamma: u8,
    pub l_i: Option<f64>,
    pub l_t: Option<f64>,
    pub l_it: Option<f64>,
    /// True when a degenerate direction made the step a no-op.
    pub skipped: bool,
    /// `(yaw, pitch)` of each view, shared by the style and train renders.
    pub poses: Vec<[f64; 2]>,
}

/// Unnormalized difference `to - from`.
pub fn direction(from: &Embedding, to: &Embedding) -> Result<Embedding> {
    check_width(from, to)?;
    Ok(Embedding::raw(
        to.values()
            .iter()
            .zip(from.values())
            .map(|(b, a)| b - a)
            .collect(),
    ))
}

fn check_direction(d: &Embedding) -> Result<f64> {
    let n = d.norm();
    if !(n >= MIN_DIRECTION_NORM) {
        return Err(Error::DegenerateDirection { norm: n });
    }
    Ok(n)
}

/// `1 - cos(d1, d2)`, in `[0, 2]`.
pub fn cosine_direction_loss(d1: &Embedding, d2: &Embedding) -> Result<f64> {
    Ok(cosine_direction_loss_grad(d1, d2)?.0)
}

/// [`cosine_direction_loss`] and its gradient with respect to `d1`.
pub fn cosine_direction_loss_grad(d1: &Embedding, d2: &Embedding) -> Result<(f64, Vec<f64>)> {
    check_width(d1, d2)?;
    let n1 = check_direction(d1)?;
    let n2 = check_direction(d2)?;
    let dot: f64 = d1
        .values()
        .iter()
        .zip(d2.values())
        .map(|(a, b)| a * b)
        .sum();
    let cos = (dot / (n1 * n2)).clamp(-1.0, 1.0);
    let grad = d1
        .values()
        .iter()
        .zip(d2.values())
        .map(|(a, b)| -(b / (n1 * n2) - cos * a / (n1 * n1)))
        .collect();
    Ok((1.0 - cos, grad))
}

/// Renders of one fusion step.
#[derive(Debug, Clone)]
pub struct Views {
    pub poses: Vec<CameraPose>,
    pub style: Vec<Image>,
    pub train: Vec<Image>,
    /// Canonical-view source render, repeated once per view.
    pub source: Vec<Image>,
}

pub fn build_views(
    w3d: &LatentCode,
    rng: &mut SeededRng,
    cfg: &FusionConfig,
    g_s: &dyn Generator3D,
    g_t: &dyn Generator3D,
    g_o: &dyn Generator3D,
) -> Result<Views> {
    let poses = sample_multiview_poses(rng, cfg.views, cfg.yaw_range, cfg.pitch_range)?;
    let source = g_o.generate(w3d, &canonical_pose())?;
    let mut style = Vec::with_capacity(poses.len());
    let mut train = Vec::with_capacity(poses.len());
    for p in &poses {
        style.push(g_s.generate(w3d, p)?);
        train.push(g_t.generate(w3d, p)?);
    }
    Ok(Views {
        source: vec![source; poses.len()],
        poses,
        style,
        train,
    })
}

/// Mean per-view distance between style and source embeddings.
pub fn stylization_distance(
    style: &[Embedding],
    source: &[Embedding],
    reduction: DistanceReduction,
) -> Result<f64> {
    if style.is_empty() || style.len() != source.len() {
        return Err(Error::Config(format!(
            "stylization distance needs equal, non-empty view lists (got {} and {})",
            style.len(),
            source.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in style.iter().zip(source) {
        total += match reduction {
            DistanceReduction::L2 => a.distance(b)?,
            DistanceReduction::Cosine => 1.0 - a.cosine(b)?,
        };
    }
    Ok(total / style.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateDecision {
    pub gamma: u8,
    pub draw: Option<u32>,
}

/// `gamma = 0` when `D <= tau`; otherwise a uniform draw in `1..=100`
/// selects 0 when it is at most `xi` and 1 when it is not.
pub fn select_gamma(distance: f64, rng: &mut SeededRng, cfg: &FusionConfig) -> GateDecision {
    if distance <= cfg.tau {
        return GateDecision {
            gamma: 0,
            draw: None,
        };
    }
    gate_from_draw(distance, rng.uniform_int(1, 100), cfg)
}

/// The gate for a given draw, without consuming randomness.
pub fn gate_from_draw(distance: f64, draw: u32, cfg: &FusionConfig) -> GateDecision {
    if distance <= cfg.tau {
        return GateDecision {
            gamma: 0,
            draw: None,
        };
    }
    GateDecision {
        gamma: if draw <= cfg.xi { 0 } else { 1 },
        draw: Some(draw),
    }
}

/// Branch losses and the image-space gradient for every train view.
#[derive(Debug, Clone)]
pub struct IteOutcome {
    pub l_i: Option<f64>,
    pub l_t: f64,
    pub l_it: f64,
    pub grad_train: Vec<Image>,
}

/// Embeddings of one step's views.
#[derive(Debug, Clone)]
pub struct ViewEmbeddings {
    pub style: Vec<Embedding>,
    pub train: Vec<Embedding>,
    pub source: Vec<Embedding>,
}

pub fn embed_views(views: &Views, embedder: &dyn JointEmbedder) -> Result<ViewEmbeddings> {
    let embed = |imgs: &[Image]| -> Result<Vec<Embedding>> {
        imgs.iter().map(|i| embedder.embed_image(i)).collect()
    };
    Ok(ViewEmbeddings {
        style: embed(&views.style)?,
        train: embed(&views.train)?,
        // one canonical render, embedded once
        source: vec![embedder.embed_image(&views.source[0])?; views.source.len()],
    })
}

/// `L_IT = gamma * L_I + (1 - gamma) * L_T`, each branch averaged over
/// views. Fails with [`Error::DegenerateDirection`] when the train-source
/// direction vanishes, or when `gamma = 1` and the style-source direction
/// does.
pub fn ite_loss(
    views: &Views,
    embeddings: &ViewEmbeddings,
    text_direction: &Embedding,
    gamma: u8,
    embedder: &dyn JointEmbedder,
) -> Result<IteOutcome> {
    let n = views.train.len() as f64;
    let mut l_i = Some(0.0);
    let mut l_t = 0.0;
    let mut grad_train = Vec::with_capacity(views.train.len());
    for v in 0..views.train.len() {
        let d_it = direction(&embeddings.source[v], &embeddings.train[v])?;
        let d_i = direction(&embeddings.source[v], &embeddings.style[v])?;
        let (lt, gt) = cosine_direction_loss_grad(&d_it, text_direction)?;
        l_t += lt / n;
        let mut g: Vec<f64> = gt.iter().map(|x| x * (1.0 - gamma as f64) / n).collect();
        match cosine_direction_loss_grad(&d_it, &d_i) {
            Ok((li, gi)) => {
                l_i = l_i.map(|s| s + li / n);
                g.iter_mut()
                    .zip(&gi)
                    .for_each(|(a, b)| *a += b * gamma as f64 / n);
            }
            Err(e) if gamma == 1 => return Err(e),
            Err(_) => l_i = None,
        }
        grad_train.push(embedder.embed_image_backward(&views.train[v], &g)?);
    }
    let l_it = if gamma == 1 {
        l_i.expect("image branch defined when gamma is 1")
    } else {
        l_t
    };
    Ok(IteOutcome {
        l_i,
        l_t,
        l_it,
        grad_train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{ToyBackendConfig, ToyEmbedder};
    use proptest::prelude::*;

    fn unit(v: Vec<f64>) -> Embedding {
        Embedding::unit(v).unwrap()
    }

    fn basis(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn direction_cases() {
        let e = unit(vec![0.6, 0.8]);
        assert_eq!(direction(&e, &e).unwrap().norm(), 0.0);
        let neg = unit(vec![-0.6, -0.8]);
        assert!((direction(&e, &neg).unwrap().norm() - 2.0).abs() < 1e-12);
        let o = direction(&unit(basis(0, 4)), &unit(basis(1, 4))).unwrap();
        assert!((o.norm() - 2f64.sqrt()).abs() < 1e-12);
        assert!(!o.is_normalized());
        assert!(matches!(
            direction(&unit(basis(0, 3)), &unit(basis(0, 4))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cosine_loss_analytic_cases() {
        let a = Embedding::raw(vec![1.0, 2.0, 3.0]);
        let b = Embedding::raw(vec![2.0, 4.0, 6.0]);
        assert!(cosine_direction_loss(&a, &b).unwrap().abs() < 1e-9);
        let c = Embedding::raw(vec![-1.0, -2.0, -3.0]);
        assert!((cosine_direction_loss(&a, &c).unwrap() - 2.0).abs() < 1e-9);
        let o = Embedding::raw(vec![2.0, -1.0, 0.0]);
        assert!((cosine_direction_loss(&a, &o).unwrap() - 1.0).abs() < 1e-9);
        let z = Embedding::raw(vec![0.0; 3]);
        assert!(matches!(
            cosine_direction_loss(&z, &a),
            Err(Error::DegenerateDirection { .. })
        ));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(12);
        let d1 = Embedding::raw(rng.normal_vec(512));
        let d2 = Embedding::raw(rng.normal_vec(512));
        let (_, g) = cosine_direction_loss_grad(&d1, &d2).unwrap();
        for i in [0, 100, 511] {
            let h = 1e-6;
            let mut p = d1.values().to_vec();
            p[i] += h;
            let mut m = d1.values().to_vec();
            m[i] -= h;
            let fd = (cosine_direction_loss(&Embedding::raw(p), &d2).unwrap()
                - cosine_direction_loss(&Embedding::raw(m), &d2).unwrap())
                / (2.0 * h);
            assert!(
                (g[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-8),
                "{i}: {} vs {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn distance_cases() {
        let a = vec![unit(basis(0, 4)), unit(basis(1, 4))];
        assert_eq!(
            stylization_distance(&a, &a, DistanceReduction::L2).unwrap(),
            0.0
        );
        let neg: Vec<_> = a
            .iter()
            .map(|e| unit(e.values().iter().map(|v| -v).collect()))
            .collect();
        assert!(
            (stylization_distance(&a, &neg, DistanceReduction::L2).unwrap() - 2.0).abs() < 1e-12
        );
        let orth = vec![unit(basis(2, 4)), unit(basis(3, 4))];
        assert!(
            (stylization_distance(&a, &orth, DistanceReduction::L2).unwrap() - 2f64.sqrt()).abs()
                < 1e-12
        );
        assert!(
            (stylization_distance(&a, &orth, DistanceReduction::Cosine).unwrap() - 1.0).abs()
                < 1e-12
        );
        assert!(matches!(
            stylization_distance(&[], &[], DistanceReduction::L2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gate_branches() {
        let cfg = FusionConfig::default();
        let mut rng = SeededRng::new(0);
        let before = rng.state();
        assert_eq!(
            select_gamma(0.4, &mut rng, &cfg),
            GateDecision {
                gamma: 0,
                draw: None
            }
        );
        assert_eq!(rng.state(), before, "no draw below the threshold");
        assert_eq!(gate_from_draw(0.9, 30, &cfg).gamma, 0);
        assert_eq!(gate_from_draw(0.9, 80, &cfg).gamma, 1);
        assert_eq!(gate_from_draw(0.9, 50, &cfg).gamma, 0);
        assert_eq!(gate_from_draw(0.9, 51, &cfg).gamma, 1);
    }

    proptest! {
        #[test]
        fn raising_tau_never_turns_gamma_on(d in 0.0f64..2.0, draw in 1u32..=100, t1 in 0.01f64..1.99, t2 in 0.01f64..1.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let low = FusionConfig { tau: lo, ..Default::default() };
            let high = FusionConfig { tau: hi, ..Default::default() };
            let g_low = gate_from_draw(d, draw, &low).gamma;
            let g_high = gate_from_draw(d, draw, &high).gamma;
            prop_assert!(!(g_low == 0 && g_high == 1));
        }
    }

    fn toy_views() -> (Views, ToyEmbedder, Embedding) {
        let bcfg = ToyBackendConfig {
            seed: 0,
            resolution: 16,
        };
        let g_o = bcfg.generator();
        let g_s = g_o.stylized(4);
        let w = crate::backends::mapped_noise_latent(&g_o, &SeededRng::new(2).normal_vec(512));
        let views = build_views(
            &w,
            &mut SeededRng::new(3),
            &FusionConfig::default(),
            &g_s,
            &g_o,
            &g_o,
        )
        .unwrap();
        let e = bcfg.embedder();
        let dt = direction(
            &e.embed_text("photo").unwrap(),
            &e.embed_text("sketch").unwrap(),
        )
        .unwrap();
        (views, e, dt)
    }

    #[test]
    fn views_are_pose_matched() {
        let (v, _, _) = toy_views();
        assert_eq!(v.poses.len(), 3);
        assert_eq!(v.style.len(), 3);
        assert_eq!(v.train.len(), 3);
        assert!(v.source.iter().all(|s| s == &v.source[0]));
    }

    #[test]
    fn identical_generators_at_canonical_pose_match_source() {
        let bcfg = ToyBackendConfig {
            seed: 0,
            resolution: 16,
        };
        let g = bcfg.generator();
        let w = crate::backends::mapped_noise_latent(&g, &SeededRng::new(2).normal_vec(512));
        let cfg = FusionConfig {
            yaw_range: AngleRange::new(0.0, 0.0),
            pitch_range: AngleRange::new(0.0, 0.0),
            ..Default::default()
        };
        let v = build_views(&w, &mut SeededRng::new(3), &cfg, &g, &g, &g).unwrap();
        assert_eq!(v.train, v.source);
    }

    #[test]
    fn gate_algebra_selects_one_branch() {
        let (v, e, dt) = toy_views();
        let emb = embed_views(&v, &e).unwrap();
        let one = ite_loss(&v, &emb, &dt, 1, &e).unwrap();
        assert_eq!(one.l_it, one.l_i.unwrap());
        let zero = ite_loss(&v, &emb, &dt, 0, &e).unwrap();
        assert_eq!(zero.l_it, zero.l_t);
        assert_eq!(one.l_t, zero.l_t);
        for l in [one.l_i.unwrap(), one.l_t] {
            assert!((0.0..=2.0).contains(&l));
        }
    }

    #[test]
    fn aligned_directions_give_zero_loss() {
        let (v, e, _) = toy_views();
        let mut emb = embed_views(&v, &e).unwrap();
        // make the style embedding coincide with the train embedding
        emb.style = emb.train.clone();
        let dt = direction(&emb.source[0], &emb.train[0]).unwrap();
        let mut v1 = v.clone();
        v1.train.truncate(1);
        v1.style.truncate(1);
        v1.source.truncate(1);
        let mut emb1 = emb.clone();
        emb1.train.truncate(1);
        emb1.style.truncate(1);
        emb1.source.truncate(1);
        for gamma in [0, 1] {
            assert!(ite_loss(&v1, &emb1, &dt, gamma, &e).unwrap().l_it.abs() < 1e-12);
        }
    }

    #[test]
    fn ite_gradient_matches_finite_differences() {
        let (v, e, dt) = toy_views();
        for gamma in [0u8, 1] {
            let emb = embed_views(&v, &e).unwrap();
            let out = ite_loss(&v, &emb, &dt, gamma, &e).unwrap();
            let f = |views: &Views| {
                ite_loss(views, &embed_views(views, &e).unwrap(), &dt, gamma, &e)
                    .unwrap()
                    .l_it
            };
            for (view, i) in [(0, 5), (1, 300), (2, 700)] {
                let h = 1e-6;
                let mut p = v.clone();
                p.train[view].data_mut()[i] += h;
                let mut m = v.clone();
                m.train[view].data_mut()[i] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let an = out.grad_train[view].data()[i];
                assert!(
                    (an - fd).abs() <= 1e-4 * fd.abs().max(1e-6),
                    "gamma {gamma} view {view}[{i}]: {an} vs {fd}"
                );
            }
        }
    }
}
