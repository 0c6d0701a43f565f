use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use orient_core::conddiffusion::{load_denoiser, load_trainer, sample_batch, save_trainer, Denoiser, SampleRequest, Trainer, TrainingSet};
use orient_core::evalmetrics::{
    a_lpips_proxy, bench_report, r_precision_proxy, score_consistency, MetricReport, PromptMetrics, ViewClassifier,
};
use orient_core::image::Image;
use orient_core::lifter::{self, LiftMode, RunLog, GRID_FILE, RUNLOG_FILE, TURNTABLE_DIR};
use orient_core::quatpose::pose_from_spherical;
use orient_core::radiancefield::RadianceGrid;
use orient_core::synthscenes::{build_dataset, MultiViewDataset};

use crate::config::ExperimentConfig;
use crate::failure::Failure;

pub const DENOISER_FILE: &str = "denoiser.ograd";
pub const LOSS_LOG_FILE: &str = "loss.jsonl";
pub const LIFT_META_FILE: &str = "lift.json";
pub const LOCK_FILE: &str = ".orient.lock";

type Outcome = Result<(), Failure>;

/// Exclusive ownership of a run directory for the life of the value.
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))?;
        let p = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&p).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Failure::io(format!("{} is locked by another run (remove {} if that run is gone)", dir.display(), p.display()))
            } else {
                Failure::io(format!("cannot create {}: {e}", p.display()))
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self(p))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

/// A directory argument means the denoiser file inside it.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DENOISER_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Outcome {
    let _lock = RunLock::acquire(out)?;
    let ds = build_dataset(&cfg.dataset)?;
    ds.save(out)?;
    cfg.write_resolved(out)?;
    println!("wrote {} frames to {}", ds.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct LossLine {
    step: u64,
    loss: f64,
}

/// Trains up to `config.steps`, or only until `max_steps` when given (the
/// run stays resumable either way).
pub fn train_denoiser(cfg: &ExperimentConfig, data: &Path, out: &Path, resume: bool, max_steps: Option<u64>) -> Outcome {
    let _lock = RunLock::acquire(out)?;
    let ds = MultiViewDataset::load(data)?;
    let ckpt = out.join(DENOISER_FILE);
    let mut trainer: Trainer<f64> = if resume {
        let t = load_trainer(&ckpt)?;
        println!("resuming at step {} of {}", t.step, t.config.steps);
        t
    } else {
        let model = Denoiser::new(cfg.diffusion.model, cfg.diffusion.schedule()?)?;
        Trainer::new(model, cfg.diffusion.train.clone())?
    };
    let mc = trainer.model.config;
    if ds.manifest.config.resolution != mc.resolution || ds.manifest.config.classes > mc.classes {
        return Err(Failure::config(format!(
            "dataset ({}px, {} classes) does not fit the model ({}px, {} classes)",
            ds.manifest.config.resolution, ds.manifest.config.classes, mc.resolution, mc.classes
        )));
    }
    cfg.write_resolved(out)?;
    let set = TrainingSet::<f64>::from_dataset(&ds)?;
    let log_path = out.join(LOSS_LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Failure::io(format!("cannot open {}: {e}", log_path.display())))?;
    let every = cfg.diffusion.checkpoint_every;
    let end = max_steps.map_or(trainer.config.steps, |m| m.min(trainer.config.steps));
    while trainer.step < end {
        let stop = if every == 0 { end } else { ((trainer.step / every + 1) * every).min(end) };
        let mut io_err = None;
        trainer.run_until(&set, stop, |r| {
            println!("step {:>6}  loss {:.6}", r.step, r.loss);
            let line = serde_json::to_string(&LossLine { step: r.step, loss: r.loss }).expect("loss line serializes");
            if let Err(e) = writeln!(log, "{line}") {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(Failure::io(format!("cannot write {}: {e}", log_path.display())));
        }
        save_trainer(&ckpt, &trainer)?;
    }
    if trainer.step == 0 || !ckpt.exists() {
        save_trainer(&ckpt, &trainer)?;
    }
    println!("saved {}", ckpt.display());
    Ok(())
}

pub struct SampleArgs<'a> {
    pub ckpt: &'a Path,
    pub class_id: usize,
    pub azimuths_deg: &'a [f64],
    pub elevation_deg: f64,
    pub seed: u64,
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
    pub out: &'a Path,
}

pub fn sample_file_name(az_deg: f64) -> String {
    format!("az_{:07.2}.ppm", az_deg)
}

/// Tiles equally sized images left to right.
pub fn contact_sheet(images: &[Image]) -> orient_core::Result<Image> {
    let (h, w) = (images[0].height, images[0].width);
    let mut sheet = Image::filled(h, w * images.len(), [0.0; 3]);
    for (i, im) in images.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                sheet.set_pixel(r, i * w + c, im.pixel(r, c));
            }
        }
    }
    Ok(sheet)
}

pub fn sample_2d(cfg: &ExperimentConfig, a: &SampleArgs) -> Outcome {
    let model: Denoiser<f64> = load_denoiser(&checkpoint_path(a.ckpt))?;
    if a.class_id >= model.config.classes {
        return Err(Failure::config(format!("class {} outside 0..{}", a.class_id, model.config.classes)));
    }
    if a.azimuths_deg.is_empty() {
        return Err(Failure::config("--azimuths needs at least one value"));
    }
    let _lock = RunLock::acquire(a.out)?;
    let radius = cfg.lift.camera.radius;
    let reqs = a
        .azimuths_deg
        .iter()
        .map(|&az| {
            let pose = pose_from_spherical(az.to_radians(), a.elevation_deg.to_radians(), radius)?;
            Ok(SampleRequest { class: Some(a.class_id), orientation: pose.orientation, seed: a.seed })
        })
        .collect::<orient_core::Result<Vec<_>>>()?;
    let steps = a.steps.unwrap_or(cfg.diffusion.sample_steps);
    let guidance = a.guidance.unwrap_or(cfg.diffusion.guidance_scale);
    let images = sample_batch(&model, &reqs, steps, guidance)?;
    for (img, &az) in images.iter().zip(a.azimuths_deg) {
        img.write_ppm(&a.out.join(sample_file_name(az)))?;
    }
    contact_sheet(&images)?.write_ppm(&a.out.join("sheet.ppm"))?;
    cfg.write_resolved(a.out)?;
    println!("wrote {} samples and a contact sheet to {}", images.len(), a.out.display());
    Ok(())
}

/// What produced a lift run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftMeta {
    pub checkpoint: PathBuf,
    pub class_id: usize,
    pub mode: LiftMode,
    pub ablate_pose: bool,
}

pub fn lift(cfg: &ExperimentConfig, ckpt: &Path, ablate_pose: bool, out: &Path) -> Outcome {
    let lc = cfg.lift_config();
    let ckpt = checkpoint_path(ckpt);
    let _lock = RunLock::acquire(out)?;
    let (_, log) = lifter::run_lift(&ckpt, &lc, ablate_pose, out)?;
    let meta = LiftMeta {
        checkpoint: ckpt.canonicalize().unwrap_or(ckpt),
        class_id: lc.class_id,
        mode: lc.mode,
        ablate_pose,
    };
    write_file(&out.join(LIFT_META_FILE), &serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    cfg.write_resolved(out)?;
    let t = log.totals;
    println!(
        "{:?} class {}: {} rounds, {} denoiser forwards, {} field updates, {:.0} ms",
        lc.mode, lc.class_id, t.rounds, t.fwd_evals, t.field_updates, t.wall_ms
    );
    Ok(())
}

fn read_turntable(dir: &Path) -> Result<Vec<Image>, Failure> {
    let tdir = dir.join(TURNTABLE_DIR);
    let mut names: Vec<PathBuf> = fs::read_dir(&tdir)
        .map_err(|e| Failure::io(format!("cannot read {}: {e}", tdir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    names.sort();
    names.iter().map(|p| Image::read_ppm(p).map_err(Failure::from)).collect()
}

fn read_meta(dir: &Path) -> Result<LiftMeta, Failure> {
    let p = dir.join(LIFT_META_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Failure::io(format!("missing run artifact {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::io(format!("malformed {}: {e}", p.display())))
}

pub const CLASSIFIER_FILE: &str = "classifier.ograd";

/// Reuses a classifier cached in `dir` if it was fitted with the same
/// settings, else trains and caches one.
fn classifier_for(cfg: &ExperimentConfig, data: &MultiViewDataset, dir: &Path) -> Result<ViewClassifier, Failure> {
    let p = dir.join(CLASSIFIER_FILE);
    if let Ok(c) = ViewClassifier::load(&p) {
        if c.info.config == cfg.eval.classifier && c.info.dataset == data.manifest.config {
            return Ok(c);
        }
    }
    let c = ViewClassifier::train(&data.manifest.config, &cfg.eval.classifier)?;
    c.save(&p)?;
    Ok(c)
}

pub fn eval(cfg: &ExperimentConfig, run_dirs: &[PathBuf], data: &Path, ckpt: Option<&Path>, out: &Path) -> Outcome {
    if run_dirs.is_empty() {
        return Err(Failure::config("eval needs at least one --run-dir"));
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        let meta = read_meta(dir)?;
        let grid = RadianceGrid::<f64>::load(&dir.join(GRID_FILE))?;
        let frames = read_turntable(dir)?;
        runs.push((meta, grid, frames));
    }
    let ds = MultiViewDataset::load(data)?;
    let _lock = RunLock::acquire(out)?;
    let classifier = classifier_for(cfg, &ds, out)?;
    let mut rows = Vec::new();
    for (meta, grid, frames) in &runs {
        let path = ckpt.map(checkpoint_path).unwrap_or_else(|| meta.checkpoint.clone());
        let model: Denoiser<f64> = load_denoiser(&path)?;
        let settings = orient_core::radiancefield::RenderSettings { stratified: false, ..cfg.lift_config().render_settings(model.config.resolution) };
        let labels = vec![meta.class_id; frames.len()];
        rows.push(PromptMetrics {
            class_id: meta.class_id,
            a_lpips_proxy: a_lpips_proxy(frames)?,
            score_consistency: score_consistency(grid, &model, Some(meta.class_id), &cfg.eval.score, &settings)?,
            r_precision: r_precision_proxy(frames, &labels, &classifier)?,
        });
    }
    let config = serde_json::to_value(cfg).expect("config serializes");
    let report = MetricReport::from_prompts(rows, config)?;
    write_file(&out.join("metrics.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let text = report.to_text();
    write_file(&out.join("metrics.txt"), &text)?;
    cfg.write_resolved(out)?;
    print!("{text}");
    Ok(())
}

/// Accepts a run log file or a run directory holding one.
fn read_runlog(p: &Path) -> Result<RunLog, Failure> {
    let file = if p.is_dir() { p.join(RUNLOG_FILE) } else { p.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Failure::config(format!("cannot read run log {}: {e}", file.display())))?;
    RunLog::from_json(&text, &file).map_err(|e| Failure::config(e.to_string()))
}

fn default_label(p: &Path) -> String {
    let base = if p.is_dir() { p } else { p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(p) };
    base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

pub fn bench(runlogs: &[PathBuf], labels: &[String], out: Option<&Path>) -> Outcome {
    if runlogs.is_empty() {
        return Err(Failure::config("bench needs at least one run log"));
    }
    if !labels.is_empty() && labels.len() != runlogs.len() {
        return Err(Failure::config(format!("{} labels for {} run logs", labels.len(), runlogs.len())));
    }
    let mut runs = Vec::new();
    for (i, p) in runlogs.iter().enumerate() {
        let label = labels.get(i).cloned().unwrap_or_else(|| default_label(p));
        runs.push((label, read_runlog(p)?));
    }
    let report = bench_report(&runs)?;
    let text = report.to_text();
    if let Some(out) = out {
        let _lock = RunLock::acquire(out)?;
        write_file(&out.join("bench.json"), &report.to_json())?;
        write_file(&out.join("bench.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}
