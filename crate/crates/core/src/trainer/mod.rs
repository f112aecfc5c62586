//! Alternating training: paired-sample fine-tuning of the stylized
//! generator, then image-text fusion on the target generator, every cycle.

pub mod checkpoint;
pub mod pti;

use serde::{Deserialize, Serialize};

use crate::backends::{
    select_submodule_params, Backends, Generator3D, GradRequest, ParamSet, ParamView,
};
use crate::embedding::Embedding;
use crate::error::{Error, Result, Stage};
use crate::fusion::{
    build_views, direction, embed_views, ite_loss, select_gamma, stylization_distance,
    FusionConfig, FusionState,
};
use crate::image::Image;
use crate::latent::LatentCode;
use crate::optim::{OptimizerKind, ParamOptimizer};
use crate::pose::CameraPose;
use crate::rng::SeededRng;
use crate::stylizer::{apt_step, make_paired_sample, StylizeConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use pti::{pti_invert_edit, PtiConfig, PtiResult};

/// Steps of each stage per training cycle (one cycle per epoch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cadence {
    pub apt: usize,
    pub ite: usize,
}

impl Default for Cadence {
    fn default() -> Self {
        Self { apt: 1, ite: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    pub cadence: Cadence,
    pub trainable: Vec<String>,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub stylize: StylizeConfig,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            step_size: 2e-3,
            cadence: Cadence::default(),
            trainable: vec![
                "synthesis".into(),
                "superresolution".into(),
                "decoder".into(),
            ],
            seed: 0,
            checkpoint_every: 50,
            stylize: StylizeConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.cadence.apt == 0 || self.cadence.ite == 0 {
            return Err(Error::Config(format!(
                "train.cadence must be positive, got {}:{}",
                self.cadence.apt, self.cadence.ite
            )));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "train.step_size must be > 0, got {}",
                self.step_size
            )));
        }
        self.stylize.validate(layers)?;
        self.fusion.validate()
    }
}

/// Fixed inputs of a run: the style image and its inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainInputs {
    pub style_image: Image,
    pub w3d: LatentCode,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AptRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Random streams of a run, one per consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRngs {
    pub apt: SeededRng,
    pub views: SeededRng,
    pub gate: SeededRng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        let root = SeededRng::new(seed);
        Self {
            apt: root.fork("train/apt"),
            views: root.fork("train/views"),
            gate: root.fork("train/gate"),
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: usize,
    pub g_s: ParamSet,
    pub g_t: ParamSet,
    pub apt_optimizer: ParamOptimizer,
    pub ite_optimizer: ParamOptimizer,
    pub rngs: RunRngs,
    pub apt_history: Vec<AptRecord>,
    pub fusion_history: Vec<FusionState>,
    pub inputs: TrainInputs,
}

/// Owns the three generators of a run. The source generator is never
/// mutated.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    backends: &'a Backends,
    view: ParamView,
    g_s: Box<dyn Generator3D>,
    g_t: Box<dyn Generator3D>,
    text_direction: Embedding,
    state: RunState,
}

impl<'a> Trainer<'a> {
    /// Fresh run: both trainable generators start as copies of the source.
    pub fn new(cfg: TrainConfig, backends: &'a Backends, inputs: TrainInputs) -> Result<Self> {
        let g_o = backends.generator.as_ref();
        let state = RunState {
            epoch: 0,
            g_s: g_o.params().clone(),
            g_t: g_o.params().clone(),
            apt_optimizer: ParamOptimizer::new(OptimizerKind::Adam, cfg.step_size),
            ite_optimizer: ParamOptimizer::new(OptimizerKind::Adam, cfg.step_size),
            rngs: RunRngs::new(cfg.seed),
            apt_history: Vec::new(),
            fusion_history: Vec::new(),
            inputs,
        };
        Self::from_state(cfg, backends, state)
    }

    /// Continues from a saved state.
    pub fn from_state(cfg: TrainConfig, backends: &'a Backends, state: RunState) -> Result<Self> {
        let g_o = backends.generator.as_ref();
        cfg.validate(g_o.latent_shape().0)?;
        for (name, p) in [("stylized", &state.g_s), ("target", &state.g_t)] {
            if !p.same_layout(g_o.params()) {
                return Err(Error::incompatible(
                    "<run state>",
                    format!("{name} generator parameters do not match the backend layout"),
                ));
            }
        }
        let view = select_submodule_params(g_o, &cfg.trainable)?;
        let mut g_s = g_o.clone_box();
        *g_s.params_mut() = state.g_s.clone();
        let mut g_t = g_o.clone_box();
        *g_t.params_mut() = state.g_t.clone();
        let e = backends.embedder.as_ref();
        let text_direction = direction(
            &e.embed_text(&cfg.fusion.source_text)?,
            &e.embed_text(&cfg.fusion.target_text)?,
        )?;
        Ok(Self {
            cfg,
            backends,
            view,
            g_s,
            g_t,
            text_direction,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn stylized(&self) -> &dyn Generator3D {
        self.g_s.as_ref()
    }

    pub fn target(&self) -> &dyn Generator3D {
        self.g_t.as_ref()
    }

    pub fn source(&self) -> &dyn Generator3D {
        self.backends.generator.as_ref()
    }

    pub fn text_direction(&self) -> &Embedding {
        &self.text_direction
    }

    /// Snapshot of the run, with current generator parameters.
    pub fn state(&self) -> RunState {
        let mut s = self.state.clone();
        s.g_s = self.g_s.params().clone();
        s.g_t = self.g_t.params().clone();
        s
    }

    pub fn into_state(mut self) -> RunState {
        self.state.g_s = self.g_s.params().clone();
        self.state.g_t = self.g_t.params().clone();
        self.state
    }

    /// APT steps of the current cycle; touches only the stylized generator.
    pub fn apt_cycle(&mut self) -> Result<Vec<AptRecord>> {
        let epoch = self.state.epoch + 1;
        let inputs = &self.state.inputs;
        let mut out = Vec::with_capacity(self.cfg.cadence.apt);
        for _ in 0..self.cfg.cadence.apt {
            let step = self.state.apt_history.len();
            let mut batch = Vec::with_capacity(self.cfg.stylize.batch_size);
            for _ in 0..self.cfg.stylize.batch_size {
                batch.push(make_paired_sample(
                    &inputs.w3d,
                    &inputs.pose,
                    &mut self.state.rngs.apt,
                    &self.cfg.stylize,
                    self.g_s.as_ref(),
                )?);
            }
            let loss = apt_step(
                &inputs.style_image,
                &batch,
                self.g_s.as_mut(),
                self.backends.oracle.as_ref(),
                self.cfg.stylize.loss,
                &mut self.state.apt_optimizer,
                &self.view,
                step,
            )
            .map_err(|e| match e {
                Error::Divergence { stage, .. } => Error::Divergence { stage, step: epoch },
                other => other,
            })?;
            let rec = AptRecord { epoch, step, loss };
            self.state.apt_history.push(rec);
            out.push(rec);
        }
        Ok(out)
    }

    /// ITE steps of the current cycle; touches only the target generator.
    pub fn ite_cycle(&mut self) -> Result<Vec<FusionState>> {
        let epoch = self.state.epoch + 1;
        let mut out = Vec::with_capacity(self.cfg.cadence.ite);
        for _ in 0..self.cfg.cadence.ite {
            let rec = self.ite_step(epoch)?;
            self.state.fusion_history.push(rec.clone());
            out.push(rec);
        }
        Ok(out)
    }

    fn ite_step(&mut self, epoch: usize) -> Result<FusionState> {
        let fusion = &self.cfg.fusion;
        let embedder = self.backends.embedder.as_ref();
        let w3d = &self.state.inputs.w3d;
        let views = build_views(
            w3d,
            &mut self.state.rngs.views,
            fusion,
            self.g_s.as_ref(),
            self.g_t.as_ref(),
            self.backends.generator.as_ref(),
        )?;
        let emb = embed_views(&views, embedder)?;
        let distance = stylization_distance(&emb.style, &emb.source, fusion.distance)?;
        let gate = select_gamma(distance, &mut self.state.rngs.gate, fusion);
        let mut rec = FusionState {
            epoch,
            distance,
            draw: gate.draw,
            gamma: gate.gamma,
            l_i: None,
            l_t: None,
            l_it: None,
            skipped: false,
            poses: views.poses.iter().map(|p| [p.yaw(), p.pitch()]).collect(),
        };
        let outcome = match ite_loss(&views, &emb, &self.text_direction, gate.gamma, embedder) {
            Ok(o) => o,
            Err(Error::DegenerateDirection { norm }) => {
                log::warn!(
                    "epoch {epoch}: degenerate direction (norm {norm:e}), fusion step skipped"
                );
                rec.skipped = true;
                return Ok(rec);
            }
            Err(e) => return Err(e),
        };
        rec.l_i = outcome.l_i;
        rec.l_t = Some(outcome.l_t);
        rec.l_it = Some(outcome.l_it);
        let mut grads = ParamSet::zeros_like(self.g_t.params());
        for (pose, g_img) in views.poses.iter().zip(&outcome.grad_train) {
            let g = self.g_t.backward(w3d, pose, g_img, GradRequest::PARAMS)?;
            grads.add_assign(&g.params.expect("parameter gradient requested"));
        }
        if !outcome.l_it.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                stage: Stage::Ite,
                step: epoch,
            });
        }
        self.state
            .ite_optimizer
            .step(self.g_t.params_mut(), &grads, &self.view)?;
        Ok(rec)
    }

    /// One full cycle: APT steps, then ITE steps.
    pub fn run_epoch(&mut self) -> Result<(Vec<AptRecord>, Vec<FusionState>)> {
        self.run_epoch_with(|_, _| {})
    }

    /// [`Trainer::run_epoch`], calling `after_stage` once each stage of the
    /// cycle has finished.
    pub fn run_epoch_with(
        &mut self,
        mut after_stage: impl FnMut(Stage, &Self),
    ) -> Result<(Vec<AptRecord>, Vec<FusionState>)> {
        let apt = self.apt_cycle()?;
        after_stage(Stage::Apt, self);
        let ite = self.ite_cycle()?;
        after_stage(Stage::Ite, self);
        self.state.epoch += 1;
        Ok((apt, ite))
    }
}

/// Runs the configured number of epochs from scratch.
pub fn alternate_train(
    cfg: &TrainConfig,
    backends: &Backends,
    inputs: TrainInputs,
) -> Result<RunState> {
    let mut t = Trainer::new(cfg.clone(), backends, inputs)?;
    while t.epoch() < cfg.epochs {
        t.run_epoch()?;
    }
    Ok(t.into_state())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{artistic_case, ToyBackendConfig};
    use crate::backends::Submodule;

    fn small() -> (Backends, TrainInputs) {
        let bcfg = ToyBackendConfig {
            seed: 0,
            resolution: 16,
        };
        let case = artistic_case(&bcfg, 1).unwrap();
        let b = bcfg.build().unwrap();
        let inputs = TrainInputs {
            style_image: case.image,
            w3d: case.latent,
            pose: case.pose,
        };
        (b, inputs)
    }

    #[test]
    fn cadence_counts_steps() {
        let (b, inputs) = small();
        let cfg = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        let s = alternate_train(&cfg, &b, inputs.clone()).unwrap();
        assert_eq!(s.epoch, 10);
        assert_eq!(s.apt_history.len(), 10);
        assert_eq!(s.fusion_history.len(), 10);
        let cfg = TrainConfig {
            epochs: 3,
            cadence: Cadence { apt: 2, ite: 3 },
            ..Default::default()
        };
        let s = alternate_train(&cfg, &b, inputs).unwrap();
        assert_eq!(s.apt_history.len(), 6);
        assert_eq!(s.fusion_history.len(), 9);
    }

    #[test]
    fn stages_touch_only_their_generator() {
        let (b, inputs) = small();
        let source = b.generator.params().hash();
        let mut t = Trainer::new(TrainConfig::default(), &b, inputs).unwrap();
        for _ in 0..3 {
            let mut last = (t.stylized().params().hash(), t.target().params().hash());
            t.run_epoch_with(|stage, t| {
                let now = (t.stylized().params().hash(), t.target().params().hash());
                match stage {
                    Stage::Apt => assert!(now.0 != last.0 && now.1 == last.1),
                    _ => assert!(now.0 == last.0 && now.1 != last.1),
                }
                last = now;
            })
            .unwrap();
        }
        assert_eq!(b.generator.params().hash(), source);
        let st = t.state();
        for p in [&st.g_s, &st.g_t] {
            assert_eq!(
                p.get(Submodule::Mapping),
                b.generator.params().get(Submodule::Mapping)
            );
        }
    }

    #[test]
    fn bad_cadence_is_config_error() {
        let (b, inputs) = small();
        let cfg = TrainConfig {
            cadence: Cadence { apt: 0, ite: 1 },
            ..Default::default()
        };
        assert!(matches!(
            Trainer::new(cfg, &b, inputs),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_target_word_is_vocabulary_error() {
        let (b, inputs) = small();
        let mut cfg = TrainConfig::default();
        cfg.fusion.target_text = "a tyrannosaurus".into();
        assert!(matches!(
            Trainer::new(cfg, &b, inputs),
            Err(Error::Vocabulary(_))
        ));
    }
}
