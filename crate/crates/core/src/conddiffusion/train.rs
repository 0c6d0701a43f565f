use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{Condition, Denoiser};
use super::schedule::forward_noise;
use crate::error::{Error, Result};
use crate::quatpose::Quaternion;
use crate::scalar::Scalar;
use crate::synthscenes::MultiViewDataset;
use crate::tensorgrad::{Adam, AdamConfig, ParamSet, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub cfg_drop_prob: f64,
    pub adam: AdamConfig,
    /// Learning rate reached at the last step, as a fraction of `adam.lr`
    /// (cosine decay).
    pub final_lr_fraction: f64,
    /// Decay of the weight average used for inference; 0 disables it.
    pub ema_decay: f64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 40_000,
            batch_size: 64,
            cfg_drop_prob: 0.1,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            final_lr_fraction: 0.05,
            ema_decay: 0.999,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return Err(Error::InvalidConfig("cfg_drop_prob must lie in [0, 1]".into()));
        }
        if !(self.adam.lr >= 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::InvalidConfig("learning rate settings out of range".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig("ema_decay must lie in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate used at 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.steps <= 1 {
            return self.adam.lr;
        }
        let frac = (step.min(self.steps - 1)) as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.adam.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

/// One clean training example.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a, S> {
    pub x0: &'a [S],
    pub class_id: usize,
    pub orientation: Quaternion<S>,
}

/// Noised batch ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch<S> {
    pub x_t: Vec<S>,
    pub eps: Vec<S>,
    pub t: Vec<usize>,
    pub conds: Vec<Condition<S>>,
}

/// Draws per-item timesteps and noise and drops class tokens with
/// probability `cfg_drop_prob`.
pub fn noise_batch<S: Scalar, R: Rng>(
    batch: &[TrainItem<S>],
    model: &Denoiser<S>,
    rng: &mut R,
    cfg_drop_prob: f64,
) -> Result<NoisedBatch<S>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("training batch is empty".into()));
    }
    let p = model.config.image_len();
    let tmax = model.schedule.timesteps();
    let mut out = NoisedBatch { x_t: Vec::new(), eps: Vec::new(), t: Vec::new(), conds: Vec::new() };
    for item in batch {
        if item.x0.len() != p {
            return Err(Error::ShapeMismatch(format!("training image has {} values, model expects {p}", item.x0.len())));
        }
        let t = rng.random_range(1..=tmax);
        let eps: Vec<S> = (0..p).map(|_| S::from_f64_lossy(StandardNormal.sample(rng))).collect();
        out.x_t.extend(forward_noise(item.x0, t, &eps, &model.schedule)?);
        out.eps.extend(eps);
        out.t.push(t);
        let drop = cfg_drop_prob > 0.0 && rng.random::<f64>() < cfg_drop_prob;
        out.conds.push(Condition { class: (!drop).then_some(item.class_id), orientation: item.orientation });
    }
    Ok(out)
}

/// Per-element mean squared error between true and predicted noise.
pub fn denoising_loss<S: Scalar>(eps: &[S], eps_hat: &[S]) -> S {
    let n = S::from_usize_lossy(eps.len().max(1));
    eps.iter().zip(eps_hat).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>() / n
}

/// One optimization step on the noise-prediction loss. Returns the loss
/// measured before the update.
pub fn train_step<S: Scalar, R: Rng>(
    model: &mut Denoiser<S>,
    adam: &mut Adam<S>,
    batch: &[TrainItem<S>],
    rng: &mut R,
    cfg_drop_prob: f64,
) -> Result<S> {
    let nb = noise_batch(batch, model, rng, cfg_drop_prob)?;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let pred = model.forward_tape(&mut tape, &vars, &nb.x_t, &nb.t, &nb.conds)?;
    let target = tape.constant(crate::tensorgrad::Tensor::new(tape.shape(pred).to_vec(), nb.eps)?);
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Diverged(format!("training loss became {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let g = model.params.collect_grads(&vars, &mut grads);
    if g.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    adam.update(&mut model.params, &g)?;
    Ok(value)
}

/// Training images in `[-1, 1]` with labels and orientations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet<S> {
    pub image_len: usize,
    pub images: Vec<S>,
    pub classes: Vec<usize>,
    pub orientations: Vec<Quaternion<S>>,
}

impl<S: Scalar> TrainingSet<S> {
    pub fn from_dataset(ds: &MultiViewDataset) -> Result<Self> {
        let first = ds.frames.first().ok_or_else(|| Error::InvalidInput("dataset has no frames".into()))?;
        let image_len = first.data.len();
        let images = ds.frames.iter().flat_map(|f| f.to_signed()).map(S::from_f64_lossy).collect();
        Ok(Self {
            image_len,
            images,
            classes: ds.labels.clone(),
            orientations: ds.poses.iter().map(|p| p.orientation.cast()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn item(&self, i: usize) -> TrainItem<'_, S> {
        TrainItem {
            x0: &self.images[i * self.image_len..(i + 1) * self.image_len],
            class_id: self.classes[i],
            orientation: self.orientations[i],
        }
    }
}

/// Generator for step `step`: independent of how the run was split across
/// resumes.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Training loop state: model, optimizer, weight average and step counter.
#[derive(Debug, Clone)]
pub struct Trainer<S> {
    pub model: Denoiser<S>,
    pub adam: Adam<S>,
    /// Exponential moving average of the weights, when enabled.
    pub ema: Option<ParamSet<S>>,
    pub config: TrainConfig,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Denoiser<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam, &model.params);
        let ema = (config.ema_decay > 0.0).then(|| model.params.clone());
        Ok(Self { model, adam, ema, config, step: 0 })
    }

    /// Model with averaged weights if averaging is on, else the raw model.
    pub fn inference_model(&self) -> Denoiser<S> {
        let mut m = self.model.clone();
        if let Some(ema) = &self.ema {
            m.params = ema.clone();
        }
        m
    }

    fn update_ema(&mut self) {
        let Some(ema) = self.ema.as_mut() else { return };
        // Short warm-up so early averages are not dominated by the init.
        let d = self.config.ema_decay.min((1.0 + self.step as f64) / (10.0 + self.step as f64));
        let (d, e) = (S::from_f64_lossy(d), S::from_f64_lossy(1.0 - d));
        for (avg, cur) in ema.tensors_mut().iter_mut().zip(self.model.params.tensors()) {
            for (a, &c) in avg.data_mut().iter_mut().zip(cur.data()) {
                *a = d * *a + e * c;
            }
        }
    }

    /// Runs one step on a random minibatch of `data`.
    pub fn step_on(&mut self, data: &TrainingSet<S>) -> Result<S> {
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let mut rng = step_rng(self.config.seed, self.step);
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let batch: Vec<TrainItem<S>> = idx.iter().map(|&i| data.item(i)).collect();
        self.adam.config.lr = self.config.lr_at(self.step);
        let loss = train_step(&mut self.model, &mut self.adam, &batch, &mut rng, self.config.cfg_drop_prob)?;
        self.update_ema();
        self.step += 1;
        Ok(loss)
    }

    /// Trains until `config.steps`; see [`Trainer::run_until`].
    pub fn run(&mut self, data: &TrainingSet<S>, on_log: impl FnMut(LossRecord)) -> Result<Vec<LossRecord>> {
        self.run_until(data, self.config.steps, on_log)
    }

    /// Trains until step `stop` (at most `config.steps`), reporting the mean loss of every
    /// `log_every` window through `on_log`.
    pub fn run_until(&mut self, data: &TrainingSet<S>, stop: u64, mut on_log: impl FnMut(LossRecord)) -> Result<Vec<LossRecord>> {
        let stop = stop.min(self.config.steps);
        let mut log = Vec::new();
        let mut acc = 0.0;
        let mut count = 0u64;
        while self.step < stop {
            acc += self.step_on(data)?.to_f64_lossy();
            count += 1;
            if self.step % self.config.log_every == 0 || self.step == stop {
                let rec = LossRecord { step: self.step, loss: acc / count as f64 };
                on_log(rec);
                log.push(rec);
                acc = 0.0;
                count = 0;
            }
        }
        Ok(log)
    }
}
