use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use itportrait::backends::toy::{artistic_case, photo_case, ToyBackendConfig};
use itportrait::backends::{Backends, Generator3D};
use itportrait::config::{BackendSelection, Config};
use itportrait::container::{read_latent, read_pose, write_latent, write_pose};
use itportrait::fusion::FusionState;
use itportrait::image::Image;
use itportrait::inversion::{invert_style_image, PoseInitMode};
use itportrait::metrics::{evaluate_pair, MetricsReport};
use itportrait::pose::CameraPose;
use itportrait::trainer::{load_checkpoint, save_checkpoint, AptRecord, TrainInputs, Trainer};
use itportrait::Error;

use super::run_dir::*;
use super::{ConfigArgs, SampleKind};

fn load_config(args: &ConfigArgs, fallback: Option<&Path>) -> Result<(Config, Option<PathBuf>)> {
    let path = args
        .config
        .clone()
        .or_else(|| fallback.map(Path::to_path_buf));
    let cfg = match &path {
        Some(p) => Config::load(p, &args.set)?,
        None => Config::from_toml_with("", &args.set)?,
    };
    Ok((cfg, path))
}

fn build_backends(cfg: &Config) -> Result<Backends> {
    let b = cfg.backend.build()?;
    cfg.validate(b.generator.latent_shape().0)?;
    Ok(b)
}

pub fn invert(
    style_path: &Path,
    out: &Path,
    pose_init: PoseInitMode,
    args: &ConfigArgs,
) -> Result<()> {
    let (cfg, cfg_path) = load_config(args, None)?;
    invert_with(style_path, out, pose_init, &cfg, cfg_path.as_deref())
}

fn invert_with(
    style_path: &Path,
    out: &Path,
    pose_init: PoseInitMode,
    cfg: &Config,
    cfg_path: Option<&Path>,
) -> Result<()> {
    let mut manifest = RunManifest::new("invert", cfg_path, out, cfg);
    manifest.write(out)?;
    let backends = build_backends(cfg)?;
    let style = load_style(style_path, &backends)?;
    style.save_png(&out.join(STYLE))?;
    log::info!(
        "inverting {} ({} steps)",
        style_path.display(),
        cfg.inversion.steps
    );
    let (inv, init) = invert_style_image(&style, &cfg.inversion, &backends, pose_init)?;
    write_latent(&out.join(LATENT), &inv.w3d)?;
    write_pose(&out.join(POSE), &inv.pose)?;
    write_jsonl(&out.join(INVERSION_LOG), &inv.history)?;
    let recon = backends.generator.generate(&inv.w3d, &inv.pose)?;
    recon.save_png(&out.join(RECONSTRUCTION))?;
    let report = evaluate_pair(&recon, &style, backends.oracle.as_ref())?;
    write_json(&out.join(METRICS), &report)?;
    log::info!(
        "inversion done: psnr {:.2} dB, pose yaw {:.2} pitch {:.2}",
        report.psnr_db,
        inv.pose.yaw(),
        inv.pose.pitch()
    );
    manifest.pose_init = Some(init);
    write_json(&out.join(MANIFEST), &manifest)
}

pub enum TrainSource {
    Inversion(PathBuf),
    Style(PathBuf, PoseInitMode),
    None,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FinalLosses {
    pub l_i: Option<f64>,
    pub l_t: Option<f64>,
    pub l_it: Option<f64>,
    pub distance: Option<f64>,
    pub apt_loss: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub source_text: String,
    pub target_text: String,
    pub final_losses: FinalLosses,
    pub source_hash: String,
    pub stylized_hash: String,
    pub target_hash: String,
}

fn read_inputs(dir: &Path, backends: &Backends) -> Result<TrainInputs> {
    let style = load_style(&dir.join(STYLE), backends)?;
    let w3d = read_latent(&dir.join(LATENT))?;
    let pose = read_pose(&dir.join(POSE))?;
    if w3d.layers() != backends.generator.latent_shape().0
        || w3d.width() != backends.generator.latent_shape().1
    {
        bail!(
            "latent in {} has shape {}x{}, the backend expects {:?}",
            dir.display(),
            w3d.layers(),
            w3d.width(),
            backends.generator.latent_shape()
        );
    }
    Ok(TrainInputs {
        style_image: style,
        w3d,
        pose,
    })
}

fn divergence_context(e: Error) -> anyhow::Error {
    match e {
        Error::Divergence { stage, step } => {
            anyhow!("training halted: {stage} stage diverged at epoch {step}")
        }
        other => other.into(),
    }
}

pub fn train(out: &Path, source: TrainSource, resume: bool, args: &ConfigArgs) -> Result<()> {
    let snapshot = out.join(CONFIG_SNAPSHOT);
    let fallback = (resume && snapshot.exists()).then_some(snapshot.as_path());
    let (cfg, cfg_path) = load_config(args, fallback)?;
    RunManifest::new("train", cfg_path.as_deref(), out, &cfg).write(out)?;
    let backends = build_backends(&cfg)?;
    let tcfg = cfg.train_config();
    let apt_log = out.join(APT_LOG);
    let fusion_log = out.join(FUSION_LOG);

    let mut trainer = if resume {
        let ck = latest_checkpoint(out)?.ok_or_else(|| {
            anyhow!(
                "--resume: no checkpoint under {}",
                out.join(CHECKPOINTS).display()
            )
        })?;
        log::info!("resuming from {}", ck.display());
        let state = load_checkpoint(&ck)?;
        write_jsonl(&apt_log, &state.apt_history)?;
        write_jsonl(&fusion_log, &state.fusion_history)?;
        Trainer::from_state(tcfg.clone(), &backends, state)?
    } else {
        let inputs = match source {
            TrainSource::Inversion(dir) => read_inputs(&dir, &backends)?,
            TrainSource::Style(img, pose_init) => {
                let dir = out.join(INVERSION_DIR);
                invert_with(&img, &dir, pose_init, &cfg, cfg_path.as_deref())?;
                read_inputs(&dir, &backends)?
            }
            TrainSource::None => {
                bail!("train needs --inversion <dir>, --style <image>, or --resume")
            }
        };
        write_jsonl::<AptRecord>(&apt_log, &[])?;
        write_jsonl::<FusionState>(&fusion_log, &[])?;
        Trainer::new(tcfg.clone(), &backends, inputs)?
    };

    let ck_dir = out.join(CHECKPOINTS);
    let mut saved_at = None;
    while trainer.epoch() < tcfg.epochs {
        let (apt, ite) = trainer.run_epoch().map_err(divergence_context)?;
        append_jsonl(&apt_log, &apt)?;
        append_jsonl(&fusion_log, &ite)?;
        let e = trainer.epoch();
        if let Some(f) = ite.last() {
            if e % 10 == 0 || e == tcfg.epochs {
                log::info!(
                    "epoch {e}/{}: apt {:.5} D {:.3} gamma {} L_IT {}",
                    tcfg.epochs,
                    apt.last().map_or(f64::NAN, |a| a.loss),
                    f.distance,
                    f.gamma,
                    f.l_it.map_or("skipped".to_string(), |v| format!("{v:.4}"))
                );
            }
        }
        if tcfg.checkpoint_every > 0 && e % tcfg.checkpoint_every == 0 {
            save_checkpoint(&ck_dir.join(checkpoint_name(e)), &trainer.state())?;
            saved_at = Some(e);
        }
    }
    let state = trainer.state();
    if saved_at != Some(state.epoch) {
        save_checkpoint(&ck_dir.join(checkpoint_name(state.epoch)), &state)?;
    }
    write_latent(&out.join(LATENT), &state.inputs.w3d)?;
    write_pose(&out.join(POSE), &state.inputs.pose)?;
    state.inputs.style_image.save_png(&out.join(STYLE))?;

    let last = state.fusion_history.iter().rev().find(|f| !f.skipped);
    let summary = TrainSummary {
        epochs: state.epoch,
        source_text: tcfg.fusion.source_text.clone(),
        target_text: tcfg.fusion.target_text.clone(),
        final_losses: FinalLosses {
            l_i: last.and_then(|f| f.l_i),
            l_t: last.and_then(|f| f.l_t),
            l_it: last.and_then(|f| f.l_it),
            distance: state.fusion_history.last().map(|f| f.distance),
            apt_loss: state.apt_history.last().map(|a| a.loss),
        },
        source_hash: backends.generator.params().hash(),
        stylized_hash: state.g_s.hash(),
        target_hash: state.g_t.hash(),
    };
    write_json(&out.join(SUMMARY), &summary)?;
    log::info!("training finished at epoch {}", state.epoch);
    Ok(())
}

fn parse_sweep(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("--yaw-sweep {spec:?} must be start:end:step"))?;
    let [a, b, step] = parts[..] else {
        bail!("--yaw-sweep {spec:?} must be start:end:step");
    };
    if !(step > 0.0) || b < a {
        bail!("--yaw-sweep {spec:?} needs start <= end and a positive step");
    }
    let n = ((b - a) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| a + i as f64 * step).collect())
}

fn with_params(
    base: &dyn Generator3D,
    params: &itportrait::backends::ParamSet,
) -> Box<dyn Generator3D> {
    let mut g = base.clone_box();
    *g.params_mut() = params.clone();
    g
}

/// Resolves `path` to (run directory, checkpoint directory).
fn resolve_checkpoint(path: &Path) -> Result<(PathBuf, PathBuf)> {
    if path.join("state.json").is_file() {
        let run = path.parent().and_then(Path::parent).ok_or_else(|| {
            anyhow!(
                "checkpoint {} is not inside a run directory",
                path.display()
            )
        })?;
        return Ok((run.to_path_buf(), path.to_path_buf()));
    }
    let ck = latest_checkpoint(path)?
        .ok_or_else(|| anyhow!("no checkpoint found under {}", path.display()))?;
    Ok((path.to_path_buf(), ck))
}

pub fn render(checkpoint: &Path, sweep: &str, pitch: f64, out: &Path) -> Result<()> {
    let (run, ck) = resolve_checkpoint(checkpoint)?;
    let snapshot = run.join(CONFIG_SNAPSHOT);
    let cfg = Config::load(&snapshot, &[])?;
    RunManifest::new("render", Some(&snapshot), out, &cfg).write(out)?;
    let yaws = parse_sweep(sweep)?;
    let backends = build_backends(&cfg)?;
    let state = load_checkpoint(&ck)?;
    let (yr, pr) = (cfg.fusion.yaw_range, cfg.fusion.pitch_range);
    if !pr.contains(pitch) {
        log::warn!("pitch {pitch} outside [{}, {}], clamped", pr.lo, pr.hi);
    }
    let pitch = pr.clamp(pitch);
    let g_o = backends.generator.as_ref();
    let g_s = with_params(g_o, &state.g_s);
    let g_t = with_params(g_o, &state.g_t);
    let w = &state.inputs.w3d;
    let mut rows: [Vec<Image>; 3] = Default::default();
    for (i, &yaw) in yaws.iter().enumerate() {
        if !yr.contains(yaw) {
            log::warn!("yaw {yaw} outside [{}, {}], clamped", yr.lo, yr.hi);
        }
        let pose = CameraPose::from_yaw_pitch(yr.clamp(yaw), pitch);
        let fused = g_t.generate(w, &pose)?;
        fused.save_png(&out.join(format!("view_{i:02}.png")))?;
        rows[0].push(g_o.generate(w, &pose)?);
        rows[1].push(g_s.generate(w, &pose)?);
        rows[2].push(fused);
    }
    let grid = Image::vstack(&[
        Image::hstack(&rows[0])?,
        Image::hstack(&rows[1])?,
        Image::hstack(&rows[2])?,
    ])?;
    grid.save_png(&out.join(GRID))?;
    log::info!("rendered {} views to {}", yaws.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GateReport {
    pub steps: usize,
    pub skipped: usize,
    pub over_threshold: usize,
    pub gamma0_over_threshold: usize,
    /// Fraction of gated steps (D > tau) with gamma 0; null without any.
    pub gamma0_fraction: Option<f64>,
    pub expected_gamma0_fraction: f64,
    pub tau: f64,
    pub xi: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub source_vs_style: MetricsReport,
    pub stylized_vs_style: MetricsReport,
    pub fused_vs_style: MetricsReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: PathBuf,
    pub epochs: usize,
    pub metrics: EvalMetrics,
    pub gate: GateReport,
    pub distance_trajectory: Vec<f64>,
    pub final_losses: FinalLosses,
}

pub fn gate_report(history: &[FusionState], tau: f64, xi: u32) -> GateReport {
    let over: Vec<&FusionState> = history.iter().filter(|f| f.draw.is_some()).collect();
    let g0 = over.iter().filter(|f| f.gamma == 0).count();
    GateReport {
        steps: history.len(),
        skipped: history.iter().filter(|f| f.skipped).count(),
        over_threshold: over.len(),
        gamma0_over_threshold: g0,
        gamma0_fraction: (!over.is_empty()).then(|| g0 as f64 / over.len() as f64),
        expected_gamma0_fraction: f64::from(xi) / 100.0,
        tau,
        xi,
    }
}

pub fn eval(run: &Path, out: Option<&Path>) -> Result<()> {
    let required = [
        MANIFEST,
        CONFIG_SNAPSHOT,
        STYLE,
        APT_LOG,
        FUSION_LOG,
        SUMMARY,
    ];
    let mut missing: Vec<String> = required
        .iter()
        .filter(|f| !run.join(f).is_file())
        .map(|f| f.to_string())
        .collect();
    let ck = latest_checkpoint(run)?;
    if ck.is_none() {
        missing.push(format!("{CHECKPOINTS}/epoch-*"));
    }
    if !missing.is_empty() {
        bail!(
            "run directory {} is incomplete; missing: {}",
            run.display(),
            missing.join(", ")
        );
    }
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("eval"));
    let snapshot = run.join(CONFIG_SNAPSHOT);
    let cfg = Config::load(&snapshot, &[])?;
    RunManifest::new("eval", Some(&snapshot), &out, &cfg).write(&out)?;
    let backends = build_backends(&cfg)?;
    let state = load_checkpoint(&ck.expect("checked above"))?;
    let history: Vec<FusionState> = read_jsonl(&run.join(FUSION_LOG))?;
    let summary: TrainSummary = read_json(&run.join(SUMMARY))?;

    let g_o = backends.generator.as_ref();
    let oracle = backends.oracle.as_ref();
    let (w, pose, style) = (
        &state.inputs.w3d,
        &state.inputs.pose,
        &state.inputs.style_image,
    );
    let metric = |g: &dyn Generator3D| -> Result<MetricsReport> {
        Ok(evaluate_pair(&g.generate(w, pose)?, style, oracle)?)
    };
    let report = EvalReport {
        run: run.to_path_buf(),
        epochs: state.epoch,
        metrics: EvalMetrics {
            source_vs_style: metric(g_o)?,
            stylized_vs_style: metric(with_params(g_o, &state.g_s).as_ref())?,
            fused_vs_style: metric(with_params(g_o, &state.g_t).as_ref())?,
        },
        gate: gate_report(&history, cfg.fusion.tau, cfg.fusion.xi),
        distance_trajectory: history.iter().map(|f| f.distance).collect(),
        final_losses: summary.final_losses,
    };
    write_json(&out.join(EVAL_REPORT), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn toy_sample(kind: SampleKind, case: u64, out: &Path, args: &ConfigArgs) -> Result<()> {
    let (cfg, cfg_path) = load_config(args, None)?;
    RunManifest::new("toy-sample", cfg_path.as_deref(), out, &cfg).write(out)?;
    let BackendSelection::Toy { seed, resolution } = cfg.backend else {
        bail!("toy-sample needs the toy backend");
    };
    let tcfg = ToyBackendConfig { seed, resolution };
    let sample = match kind {
        SampleKind::Artistic => artistic_case(&tcfg, case)?,
        SampleKind::Photo => photo_case(&tcfg, case)?,
    };
    fs::create_dir_all(out)?;
    sample.image.save_png(&out.join(STYLE))?;
    write_latent(&out.join(LATENT), &sample.latent)?;
    write_pose(&out.join(POSE), &sample.pose)?;
    log::info!("wrote {}", out.join(STYLE).display());
    Ok(())
}
