use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::quatpose::{sine_encode, PoseEmbedding, Quaternion, DEFAULT_NUM_FREQUENCIES};
use crate::scalar::Scalar;
use crate::tensorgrad::{ParamSet, Tape, Tensor, Var};

/// Network dimensions. Images are `resolution x resolution x 3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub resolution: usize,
    pub classes: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    /// Hidden layers: one input layer followed by `depth - 1` residual blocks.
    pub depth: usize,
    pub num_frequencies: usize,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            classes: 8,
            cond_dim: 64,
            hidden: 256,
            depth: 3,
            num_frequencies: DEFAULT_NUM_FREQUENCIES,
            init_seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.classes == 0 || self.cond_dim == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::InvalidConfig("denoiser dimensions must be positive".into()));
        }
        if self.num_frequencies == 0 {
            return Err(Error::InvalidConfig("num_frequencies must be positive".into()));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.resolution * self.resolution * 3
    }

    pub fn pose_len(&self) -> usize {
        4 * self.num_frequencies
    }
}

/// Learned class token, or the guidance null token.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding<S> {
    pub values: Vec<S>,
    pub is_null: bool,
}

/// Conditioning of one denoiser query: an optional class and the camera
/// orientation. `class: None` selects the null token; the pose is kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition<S> {
    pub class: Option<usize>,
    pub orientation: Quaternion<S>,
}

impl<S: Scalar> Condition<S> {
    pub fn new(class: usize, orientation: Quaternion<S>) -> Self {
        Self { class: Some(class), orientation }
    }

    pub fn null(orientation: Quaternion<S>) -> Self {
        Self { class: None, orientation }
    }

    pub fn without_class(self) -> Self {
        Self { class: None, ..self }
    }
}

/// Anything that predicts noise for a batch of noisy images.
pub trait EpsPredictor<S: Scalar>: Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// Image side length.
    fn resolution(&self) -> usize;

    fn image_len(&self) -> usize {
        self.resolution() * self.resolution() * 3
    }

    /// `x_t` holds `conds.len()` images back to back; `t` gives one timestep per image.
    fn predict_eps(&self, x_t: &[S], t: &[usize], conds: &[Condition<S>]) -> Result<Vec<S>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Layout {
    pub class_emb: usize,
    pub null_emb: usize,
    pub pose_proj: usize,
    pub time_emb: usize,
    pub in_x: usize,
    pub in_c: usize,
    pub in_b: usize,
    pub blocks: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub skip: usize,
}

/// Residual MLP noise predictor on flattened images with fused
/// class, pose and timestep conditioning, plus a per-timestep linear skip
/// `eps = g[t] x_t + mlp(...)` that carries the full-rank noise component
/// past the hidden bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<S> {
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamSet<S>,
    layout: Layout,
}

pub(crate) fn block_names(i: usize) -> (String, String) {
    (format!("block{i}.w"), format!("block{i}.b"))
}

fn gaussian<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape, (0..n).map(|_| S::from_f64_lossy(dist.sample(rng))).collect()).expect("finite init")
}

/// Data scale assumed by the initial skip gains.
pub const SKIP_DATA_STD: f64 = 0.5;

/// Per-timestep gain of the `x_t -> eps` skip path, initialized to the
/// noise-optimal linear coefficient for data of standard deviation
/// [`SKIP_DATA_STD`].
fn skip_table<S: Scalar>(schedule: &NoiseSchedule) -> Tensor<S> {
    let data = (1..=schedule.timesteps())
        .map(|t| {
            let ab = schedule.alpha_bar(t);
            let b = (1.0 - ab).sqrt();
            S::from_f64_lossy(b / (1.0 - ab + ab * SKIP_DATA_STD * SKIP_DATA_STD))
        })
        .collect();
    Tensor::new(vec![schedule.timesteps(), 1], data).expect("finite table")
}

/// Sinusoidal timestep features, used as the initial value of the learned table.
fn timestep_table<S: Scalar>(timesteps: usize, d: usize) -> Tensor<S> {
    let half = d.div_ceil(2);
    let mut data = Vec::with_capacity(timesteps * d);
    for t in 1..=timesteps {
        for j in 0..d {
            let freq = (-((j % half) as f64) * (1000.0f64).ln() / half as f64).exp();
            let a = t as f64 * freq;
            data.push(S::from_f64_lossy(if j < half { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(vec![timesteps, d], data).expect("finite table")
}

impl<S: Scalar> Denoiser<S> {
    /// Freshly initialized network. The pose projection starts at zero so the
    /// untrained model ignores orientation.
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (p, d, h) = (config.image_len(), config.cond_dim, config.hidden);
        let mut params = ParamSet::new();
        params.insert("class_emb", gaussian(&mut rng, vec![config.classes, d], 1.0));
        params.insert("null_emb", gaussian(&mut rng, vec![1, d], 1.0));
        params.insert("pose_proj", Tensor::zeros(vec![config.pose_len(), d]));
        params.insert("time_emb", timestep_table(schedule.timesteps(), d));
        params.insert("in_x.w", gaussian(&mut rng, vec![p, h], (1.0 / p as f64).sqrt()));
        params.insert("in_c.w", gaussian(&mut rng, vec![d, h], (1.0 / d as f64).sqrt()));
        params.insert("in.b", Tensor::zeros(vec![h]));
        for i in 0..config.depth - 1 {
            let (w, b) = block_names(i);
            params.insert(w, gaussian(&mut rng, vec![h, h], (1.0 / h as f64).sqrt()));
            params.insert(b, Tensor::zeros(vec![h]));
        }
        params.insert("out.w", gaussian(&mut rng, vec![h, p], (1.0 / h as f64).sqrt()));
        params.insert("out.b", Tensor::zeros(vec![p]));
        params.insert("skip", skip_table(&schedule));
        Self::from_params(config, schedule, params)
    }

    /// Wraps existing weights after checking every tensor shape.
    pub fn from_params(config: DenoiserConfig, schedule: NoiseSchedule, params: ParamSet<S>) -> Result<Self> {
        config.validate()?;
        let (p, d, h) = (config.image_len(), config.cond_dim, config.hidden);
        let find = |name: &str, shape: &[usize]| -> Result<usize> {
            let i = params.position(name).ok_or_else(|| Error::InvalidInput(format!("missing parameter `{name}`")))?;
            if params.tensors()[i].shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.tensors()[i].shape()
                )));
            }
            Ok(i)
        };
        let layout = Layout {
            class_emb: find("class_emb", &[config.classes, d])?,
            null_emb: find("null_emb", &[1, d])?,
            pose_proj: find("pose_proj", &[config.pose_len(), d])?,
            time_emb: find("time_emb", &[schedule.timesteps(), d])?,
            in_x: find("in_x.w", &[p, h])?,
            in_c: find("in_c.w", &[d, h])?,
            in_b: find("in.b", &[h])?,
            blocks: if config.depth > 1 { find("block0.w", &[h, h])? } else { 0 },
            out_w: find("out.w", &[h, p])?,
            out_b: find("out.b", &[p])?,
            skip: find("skip", &[schedule.timesteps(), 1])?,
        };
        for i in 0..config.depth - 1 {
            let (w, b) = block_names(i);
            let wi = find(&w, &[h, h])?;
            let bi = find(&b, &[h])?;
            if wi != layout.blocks + 2 * i || bi != wi + 1 {
                return Err(Error::InvalidInput("residual block parameters out of order".into()));
            }
        }
        Ok(Self { config, schedule, params, layout })
    }

    fn data(&self, i: usize) -> &[S] {
        self.params.tensors()[i].data()
    }

    /// Class token for `class`, or the null token.
    pub fn condition_embedding(&self, class: Option<usize>) -> Result<ConditionEmbedding<S>> {
        let d = self.config.cond_dim;
        match class {
            Some(c) if c >= self.config.classes => {
                Err(Error::InvalidInput(format!("class {c} outside 0..{}", self.config.classes)))
            }
            Some(c) => Ok(ConditionEmbedding { values: self.data(self.layout.class_emb)[c * d..(c + 1) * d].to_vec(), is_null: false }),
            None => Ok(ConditionEmbedding { values: self.data(self.layout.null_emb).to_vec(), is_null: true }),
        }
    }

    pub fn pose_embedding(&self, q: Quaternion<S>) -> PoseEmbedding<S> {
        sine_encode(q, self.config.num_frequencies).expect("validated frequency count")
    }

    /// Copy with the pose projection zeroed: the orientation path becomes inert.
    pub fn pose_ablated(&self) -> Self {
        let mut out = self.clone();
        let i = out.layout.pose_proj;
        out.params.tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v = S::zero());
        out
    }

    fn check_batch(&self, x_len: usize, t: &[usize], n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidInput("empty denoiser batch".into()));
        }
        if x_len != n * self.config.image_len() || t.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "batch of {n} needs {} image values and {n} timesteps, got {x_len} and {}",
                n * self.config.image_len(),
                t.len()
            )));
        }
        for &ti in t {
            self.schedule.check_timestep(ti)?;
        }
        Ok(())
    }

    /// Per-item fused conditioning `c + p W + time_emb[t]`, `[n, d]`.
    fn condition_rows(&self, t: &[usize], conds: &[Condition<S>]) -> Result<Vec<S>> {
        let d = self.config.cond_dim;
        let mut out = Vec::with_capacity(conds.len() * d);
        let temb = self.data(self.layout.time_emb);
        for (c, &ti) in conds.iter().zip(t) {
            let fused = embed_condition(&self.condition_embedding(c.class)?, &self.pose_embedding(c.orientation), self)?;
            out.extend(fused.iter().zip(&temb[(ti - 1) * d..ti * d]).map(|(&a, &b)| a + b));
        }
        Ok(out)
    }

    /// Plain forward pass without recording gradients.
    pub fn forward(&self, x_t: &[S], t: &[usize], conds: &[Condition<S>]) -> Result<Vec<S>> {
        let n = conds.len();
        self.check_batch(x_t.len(), t, n)?;
        let (p, d, h) = (self.config.image_len(), self.config.cond_dim, self.config.hidden);
        let cond = self.condition_rows(t, conds)?;
        let mut hid = vec![S::zero(); n * h];
        S::gemm(n, p, h, S::one(), x_t, false, self.data(self.layout.in_x), false, S::zero(), &mut hid);
        let mut hc = vec![S::zero(); n * h];
        S::gemm(n, d, h, S::one(), &cond, false, self.data(self.layout.in_c), false, S::zero(), &mut hc);
        let b0 = self.data(self.layout.in_b);
        for (row, crow) in hid.chunks_mut(h).zip(hc.chunks(h)) {
            for ((v, &c), &b) in row.iter_mut().zip(crow).zip(b0) {
                *v = silu(*v + c + b);
            }
        }
        let mut tmp = vec![S::zero(); n * h];
        for i in 0..self.config.depth - 1 {
            let w = self.data(self.layout.blocks + 2 * i);
            let b = self.data(self.layout.blocks + 2 * i + 1);
            S::gemm(n, h, h, S::one(), &hid, false, w, false, S::zero(), &mut tmp);
            for (row, trow) in hid.chunks_mut(h).zip(tmp.chunks(h)) {
                for ((v, &a), &bb) in row.iter_mut().zip(trow).zip(b) {
                    *v = *v + silu(a + bb);
                }
            }
        }
        let mut out = vec![S::zero(); n * p];
        S::gemm(n, h, p, S::one(), &hid, false, self.data(self.layout.out_w), false, S::zero(), &mut out);
        let ob = self.data(self.layout.out_b);
        let skip = self.data(self.layout.skip);
        for ((row, xrow), &ti) in out.chunks_mut(p).zip(x_t.chunks(p)).zip(t) {
            let g = skip[ti - 1];
            for ((v, &b), &x) in row.iter_mut().zip(ob).zip(xrow) {
                *v = *v + b + g * x;
            }
        }
        Ok(out)
    }

    /// Records the forward pass on `tape` with the parameters bound as
    /// `vars` (see [`ParamSet::bind`]). Returns `[n, image_len]`.
    pub fn forward_tape(&self, tape: &mut Tape<S>, vars: &[Var], x_t: &[S], t: &[usize], conds: &[Condition<S>]) -> Result<Var> {
        let n = conds.len();
        self.check_batch(x_t.len(), t, n)?;
        if vars.len() != self.params.len() {
            return Err(Error::ShapeMismatch("parameter bindings do not match the model".into()));
        }
        let p = self.config.image_len();
        let l = self.layout;
        let x = tape.constant(Tensor::new(vec![n, p], x_t.to_vec())?);

        // Class token, with dropped items routed to the null token by mask.
        let idx: Vec<usize> = conds.iter().map(|c| c.class.unwrap_or(0)).collect();
        if let Some(bad) = conds.iter().filter_map(|c| c.class).find(|&c| c >= self.config.classes) {
            return Err(Error::InvalidInput(format!("class {bad} outside 0..{}", self.config.classes)));
        }
        let mut c = tape.embed(vars[l.class_emb], &idx)?;
        if conds.iter().any(|c| c.class.is_none()) {
            let keep: Vec<S> = conds.iter().map(|c| if c.class.is_some() { S::one() } else { S::zero() }).collect();
            let drop: Vec<S> = keep.iter().map(|&k| S::one() - k).collect();
            let keep = tape.constant(Tensor::new(vec![n, 1], keep)?);
            let drop = tape.constant(Tensor::new(vec![n, 1], drop)?);
            let kept = tape.mul(c, keep)?;
            let nulls = tape.mul(vars[l.null_emb], drop)?;
            c = tape.add(kept, nulls)?;
        }
        let mut pose = Vec::with_capacity(n * self.config.pose_len());
        for cond in conds {
            pose.extend(self.pose_embedding(cond.orientation).values);
        }
        let pose = tape.constant(Tensor::new(vec![n, self.config.pose_len()], pose)?);
        let pr = tape.matmul(pose, vars[l.pose_proj])?;
        let fused = tape.add(c, pr)?;
        let ti: Vec<usize> = t.iter().map(|&v| v - 1).collect();
        let temb = tape.embed(vars[l.time_emb], &ti)?;
        let cond = tape.add(fused, temb)?;

        let hx = tape.matmul(x, vars[l.in_x])?;
        let hc = tape.matmul(cond, vars[l.in_c])?;
        let pre = tape.add(hx, hc)?;
        let pre = tape.add(pre, vars[l.in_b])?;
        let mut hid = tape.silu(pre);
        for i in 0..self.config.depth - 1 {
            let a = tape.matmul(hid, vars[l.blocks + 2 * i])?;
            let a = tape.add(a, vars[l.blocks + 2 * i + 1])?;
            let a = tape.silu(a);
            hid = tape.add(hid, a)?;
        }
        let out = tape.matmul(hid, vars[l.out_w])?;
        let out = tape.add(out, vars[l.out_b])?;
        let gain = tape.embed(vars[l.skip], &ti)?;
        let skip = tape.mul(gain, x)?;
        tape.add(out, skip)
    }

    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser { config: self.config, schedule: self.schedule.clone(), params: self.params.cast(), layout: self.layout }
    }
}

#[inline]
fn silu<S: Scalar>(v: S) -> S {
    v * crate::tensorgrad::sigmoid(v)
}

/// Residual pose fusion `c' = c + p W`. The projection is bias-free and is
/// applied to null tokens too, so guidance never drops the pose.
pub fn embed_condition<S: Scalar>(c: &ConditionEmbedding<S>, p: &PoseEmbedding<S>, model: &Denoiser<S>) -> Result<Vec<S>> {
    let d = model.config.cond_dim;
    if c.values.len() != d || p.len() != model.config.pose_len() {
        return Err(Error::ShapeMismatch(format!(
            "condition of length {} and pose of length {} do not fit d = {d}",
            c.values.len(),
            p.len()
        )));
    }
    let w = model.data(model.layout.pose_proj);
    let mut out = c.values.clone();
    for (k, &pk) in p.values.iter().enumerate() {
        if pk == S::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w[k * d..(k + 1) * d]) {
            *o = *o + pk * wv;
        }
    }
    Ok(out)
}

impl<S: Scalar> EpsPredictor<S> for Denoiser<S> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn predict_eps(&self, x_t: &[S], t: &[usize], conds: &[Condition<S>]) -> Result<Vec<S>> {
        self.forward(x_t, t, conds)
    }
}
