use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{Denoiser, DenoiserConfig};
use super::schedule::{make_schedule, NoiseSchedule};
use super::train::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorgrad::{load_checkpoint, save_checkpoint, Adam, ParamSet, Tensor};

pub const DENOISER_FORMAT: &str = "orient-denoiser";
pub const DENOISER_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub step: u64,
    pub adam_step: u64,
}

/// JSON sidecar stored next to the binary weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSidecar {
    pub format: String,
    pub version: u32,
    pub model: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub classes: usize,
    pub num_frequencies: usize,
    pub guidance_default: f64,
    pub training: Option<TrainingState>,
}

/// Path of the sidecar belonging to weights at `weights`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

fn sidecar_for<S: Scalar>(model: &Denoiser<S>, training: Option<TrainingState>) -> DenoiserSidecar {
    let (beta_min, beta_max) = model.schedule.beta_range();
    DenoiserSidecar {
        format: DENOISER_FORMAT.into(),
        version: DENOISER_FORMAT_VERSION,
        model: model.config,
        schedule: ScheduleSpec { timesteps: model.schedule.timesteps(), beta_min, beta_max },
        classes: model.config.classes,
        num_frequencies: model.config.num_frequencies,
        guidance_default: DEFAULT_GUIDANCE,
        training,
    }
}

fn write_all<S: Scalar>(path: &Path, params: &ParamSet<S>, sidecar: &DenoiserSidecar) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(path, params)?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn save_denoiser<S: Scalar>(path: &Path, model: &Denoiser<S>) -> Result<()> {
    write_all(path, &model.params, &sidecar_for(model, None))
}

/// Saves weights, weight average and optimizer moments so training can
/// resume exactly.
pub fn save_trainer<S: Scalar>(path: &Path, trainer: &Trainer<S>) -> Result<()> {
    let mut all = trainer.model.params.clone();
    if let Some(ema) = &trainer.ema {
        for (name, t) in ema.iter() {
            all.insert(format!("ema.{name}"), t.clone());
        }
    }
    let (m, v) = trainer.adam.moments();
    let names = trainer.model.params.names().to_vec();
    for ((name, t), (mi, vi)) in names.iter().zip(trainer.model.params.tensors()).zip(m.iter().zip(v)) {
        all.insert(format!("adam.m.{name}"), Tensor::new(t.shape().to_vec(), mi.clone())?);
        all.insert(format!("adam.v.{name}"), Tensor::new(t.shape().to_vec(), vi.clone())?);
    }
    let state = TrainingState { config: trainer.config.clone(), step: trainer.step, adam_step: trainer.adam.steps() };
    write_all(path, &all, &sidecar_for(&trainer.model, Some(state)))
}

pub fn read_sidecar(path: &Path) -> Result<DenoiserSidecar> {
    let side = sidecar_path(path);
    if !path.exists() || !side.exists() {
        return Err(Error::MissingModel(path.to_path_buf()));
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sc: DenoiserSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if sc.format != DENOISER_FORMAT || sc.version != DENOISER_FORMAT_VERSION {
        return Err(Error::format(&side, format!("unsupported model format {} v{}", sc.format, sc.version)));
    }
    Ok(sc)
}

fn schedule_of(sc: &DenoiserSidecar) -> Result<NoiseSchedule> {
    make_schedule(sc.schedule.timesteps, sc.schedule.beta_min, sc.schedule.beta_max)
}

fn split_params<S: Scalar>(all: ParamSet<S>) -> (ParamSet<S>, ParamSet<S>) {
    let mut model = ParamSet::new();
    let mut extra = ParamSet::new();
    for (name, t) in all.iter() {
        if name.starts_with("adam.") || name.starts_with("ema.") {
            extra.insert(name, t.clone());
        } else {
            model.insert(name, t.clone());
        }
    }
    (model, extra)
}

/// Weight-average tensors stored under `ema.` in `extra`, if complete.
fn ema_params<S: Scalar>(model: &ParamSet<S>, extra: &ParamSet<S>) -> Option<ParamSet<S>> {
    let mut ema = ParamSet::new();
    for name in model.names() {
        ema.insert(name.clone(), extra.get(&format!("ema.{name}"))?.clone());
    }
    Some(ema)
}

/// Loads weights for inference, preferring the weight average when the
/// checkpoint has one. Missing files give [`Error::MissingModel`].
pub fn load_denoiser<S: Scalar>(path: &Path) -> Result<Denoiser<S>> {
    let sc = read_sidecar(path)?;
    let (params, extra) = split_params(load_checkpoint::<S>(path)?);
    let params = ema_params(&params, &extra).unwrap_or(params);
    Denoiser::from_params(sc.model, schedule_of(&sc)?, params)
}

/// Loads a checkpoint written by [`save_trainer`] and restores optimizer state.
pub fn load_trainer<S: Scalar>(path: &Path) -> Result<Trainer<S>> {
    let sc = read_sidecar(path)?;
    let state = sc.training.clone().ok_or_else(|| Error::format(path, "checkpoint has no training state"))?;
    let (params, extra) = split_params(load_checkpoint::<S>(path)?);
    let model = Denoiser::from_params(sc.model, schedule_of(&sc)?, params)?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for name in model.params.names() {
        let get = |k: String| -> Result<Vec<S>> {
            extra.get(&k).map(|t| t.data().to_vec()).ok_or_else(|| Error::format(path, format!("missing optimizer tensor {k}")))
        };
        m.push(get(format!("adam.m.{name}"))?);
        v.push(get(format!("adam.v.{name}"))?);
    }
    let mut adam = Adam::new(state.config.adam, &model.params);
    adam.restore(state.adam_step, m, v)?;
    let ema = if state.config.ema_decay > 0.0 {
        let e = ema_params(&model.params, &extra).ok_or_else(|| Error::format(path, "missing weight-average tensors"))?;
        Some(e)
    } else {
        None
    };
    Ok(Trainer { model, adam, ema, config: state.config, step: state.step })
}
