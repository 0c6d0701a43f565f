//! Class-to-3D optimization of a radiance field under the pose-conditioned
//! prior: score distillation (one noisy query per field update) and
//! decoupled updates (a DDIM jump to a clean target, then several MSE steps).

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conddiffusion::{ddim_step, forward_noise, guided_eps, load_denoiser, predict_x0, Condition, CountingPredictor, Denoiser, EpsPredictor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::quatpose::{pose_from_spherical, CameraPose};
use crate::radiancefield::{render_image, turntable, GridConfig, RadianceGrid, RenderSettings};
use crate::scalar::Scalar;
use crate::tensorgrad::{Adam, AdamConfig, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiftMode {
    Sds,
    Dbp,
}

impl std::str::FromStr for LiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sds" => Ok(LiftMode::Sds),
            "dbp" => Ok(LiftMode::Dbp),
            other => Err(Error::InvalidConfig(format!("unknown lift mode {other:?} (expected sds or dbp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSampling {
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub radius: f64,
}

impl Default for CameraSampling {
    fn default() -> Self {
        Self { elevation_min_deg: 10.0, elevation_max_deg: 40.0, radius: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbpConfig {
    /// Field updates per round.
    #[serde(rename = "M")]
    pub inner_updates: usize,
    pub k_start: usize,
    pub k_end: usize,
    /// Noise levels as fractions of the schedule length.
    pub t_start_frac: f64,
    pub t_end_frac: f64,
    /// DDIM stride inside a jump; `None` makes every round a single jump.
    pub stride: Option<usize>,
    /// Use classifier-free guidance while solving.
    pub guided: bool,
}

impl Default for DbpConfig {
    fn default() -> Self {
        Self { inner_updates: 10, k_start: 64, k_end: 4, t_start_frac: 0.98, t_end_frac: 0.02, stride: None, guided: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdsConfig {
    pub t_min_frac: f64,
    pub t_max_frac: f64,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self { t_min_frac: 0.02, t_max_frac: 0.98 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiftConfig {
    pub class_id: usize,
    pub guidance_scale: f64,
    pub total_rounds: usize,
    pub mode: LiftMode,
    pub dbp: DbpConfig,
    pub sds: SdsConfig,
    pub camera: CameraSampling,
    pub lr: f64,
    /// Field layout; filled from the experiment's field section, so it is
    /// not part of this section's serialized form.
    #[serde(skip)]
    pub grid: GridConfig,
    /// Ray samples per pixel while optimizing.
    pub render_samples: usize,
    pub turntable_views: usize,
    pub turntable_elevation_deg: f64,
    pub seed: u64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            class_id: 0,
            guidance_scale: 7.5,
            total_rounds: 200,
            mode: LiftMode::Dbp,
            dbp: DbpConfig::default(),
            sds: SdsConfig::default(),
            camera: CameraSampling::default(),
            lr: 1e-2,
            grid: GridConfig::default(),
            render_samples: 32,
            turntable_views: 8,
            turntable_elevation_deg: 25.0,
            seed: 0,
        }
    }
}

/// Noise levels and jump size for one decoupled round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbpState {
    pub t_cur: usize,
    pub step_cur: usize,
}

impl LiftConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.total_rounds == 0 {
            return bad("total_rounds must be at least 1");
        }
        if !(self.guidance_scale.is_finite() && self.lr > 0.0) {
            return bad("guidance_scale must be finite and lr positive");
        }
        let (ts, te) = self.t_range(timesteps);
        if !(ts > te && te >= 1) {
            return bad("need t_start > t_end >= 1");
        }
        let d = &self.dbp;
        if !(d.k_start >= d.k_end && d.k_end >= 1 && d.inner_updates >= 1) {
            return bad("need k_start >= k_end >= 1 and M >= 1");
        }
        if d.stride == Some(0) {
            return bad("dbp.stride must be at least 1");
        }
        let (lo, hi) = self.sds_range(timesteps);
        if !(1 <= lo && lo <= hi && hi <= timesteps) {
            return bad("sds timestep range must lie inside the schedule");
        }
        let c = &self.camera;
        if !(c.elevation_min_deg <= c.elevation_max_deg && c.elevation_min_deg > -90.0 && c.elevation_max_deg < 90.0) {
            return bad("camera elevation range must be ordered and inside (-90, 90)");
        }
        if !(c.radius > 3f64.sqrt()) {
            return Err(Error::CameraInsideScene { radius: c.radius });
        }
        if self.render_samples < 2 || self.turntable_views == 0 {
            return bad("render_samples must be at least 2 and turntable_views at least 1");
        }
        Ok(())
    }

    /// `(t_start, t_end)` in timesteps.
    pub fn t_range(&self, timesteps: usize) -> (usize, usize) {
        let r = |f: f64| (f * timesteps as f64).round() as usize;
        (r(self.dbp.t_start_frac).min(timesteps), r(self.dbp.t_end_frac))
    }

    pub fn sds_range(&self, timesteps: usize) -> (usize, usize) {
        let r = |f: f64| (f * timesteps as f64).round() as usize;
        (r(self.sds.t_min_frac).max(1), r(self.sds.t_max_frac).min(timesteps))
    }

    pub fn render_settings(&self, resolution: usize) -> RenderSettings {
        RenderSettings { samples: self.render_samples, ..RenderSettings::for_radius(self.camera.radius, resolution) }
    }
}

/// Random camera: azimuth uniform on the circle, elevation uniform in the
/// configured band, fixed radius.
pub fn sample_camera<R: Rng>(camera: &CameraSampling, rng: &mut R) -> Result<CameraPose<f64>> {
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let (lo, hi) = (camera.elevation_min_deg, camera.elevation_max_deg);
    let el = if hi > lo { rng.random_range(lo..hi) } else { lo };
    pose_from_spherical(az, el.to_radians(), camera.radius)
}

/// Geometric interpolation from start to end over the run, floored at the
/// end values.
pub fn anneal_schedule(round: usize, config: &LiftConfig, timesteps: usize) -> DbpState {
    let (ts, te) = config.t_range(timesteps);
    let n = config.total_rounds;
    let frac = if n <= 1 { 0.0 } else { round.min(n - 1) as f64 / (n - 1) as f64 };
    let geo = |a: usize, b: usize| ((a as f64) * (b as f64 / a as f64).powf(frac)).round().max(b as f64) as usize;
    DbpState { t_cur: geo(ts, te), step_cur: geo(config.dbp.k_start, config.dbp.k_end) }
}

/// Counters and loss of one optimization round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t_cur: usize,
    pub step: usize,
    pub fwd_evals: u64,
    pub bwd_evals: u64,
    pub field_updates: u64,
    pub wall_ms: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub rounds: u64,
    pub fwd_evals: u64,
    pub bwd_evals: u64,
    pub field_updates: u64,
    pub wall_ms: f64,
}

/// Per-round cost log of a lifting run. `totals` always equals the sums
/// over `rounds`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rounds: Vec<RoundRecord>,
    pub totals: RunTotals,
}

impl RunLog {
    pub fn push(&mut self, r: RoundRecord) {
        self.totals.rounds += 1;
        self.totals.fwd_evals += r.fwd_evals;
        self.totals.bwd_evals += r.bwd_evals;
        self.totals.field_updates += r.field_updates;
        self.totals.wall_ms += r.wall_ms;
        self.rounds.push(r);
    }

    /// Recomputes totals from the rounds.
    pub fn summed(&self) -> RunTotals {
        let mut t = RunTotals::default();
        for r in &self.rounds {
            t.rounds += 1;
            t.fwd_evals += r.fwd_evals;
            t.bwd_evals += r.bwd_evals;
            t.field_updates += r.field_updates;
            t.wall_ms += r.wall_ms;
        }
        t
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.loss).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run log serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let log: RunLog = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        let sum = log.summed();
        let same = sum.rounds == log.totals.rounds
            && sum.fwd_evals == log.totals.fwd_evals
            && sum.bwd_evals == log.totals.bwd_evals
            && sum.field_updates == log.totals.field_updates;
        if !same {
            return Err(Error::format(origin, "run log totals disagree with its rounds"));
        }
        Ok(log)
    }
}

/// Optimizer state of a field being lifted.
#[derive(Debug, Clone)]
pub struct FieldOptimizer<S> {
    pub grid: RadianceGrid<S>,
    pub adam: Adam<S>,
}

impl<S: Scalar> FieldOptimizer<S> {
    pub fn new(grid: RadianceGrid<S>, lr: f64) -> Self {
        let adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() }, &grid.params);
        Self { grid, adam }
    }

    fn apply(&mut self, grads: &[Vec<S>]) -> Result<()> {
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged("non-finite field gradient".into()));
        }
        self.adam.update(&mut self.grid.params, grads)
    }
}

fn round_rng(seed: u64, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    rng
}

fn gaussian<S: Scalar, R: Rng>(n: usize, rng: &mut R) -> Vec<S> {
    (0..n).map(|_| S::from_f64_lossy(StandardNormal.sample(rng))).collect()
}

/// Noise draw and prediction behind one score-distillation gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SdsQuery<S> {
    pub t: usize,
    pub eps: Vec<S>,
    pub eps_hat: Vec<S>,
}

/// Score-distillation gradient of the field parameters for `pose`, with the
/// prior queried through `query` (which receives the signed render).
/// The render in `[0, 1]` is mapped to `[-1, 1]` before noising, so the
/// per-pixel seed is `2 w(t) (eps_hat - eps)` with `w(t) = 1 - abar_t`.
pub fn sds_gradient<S: Scalar>(
    grid: &RadianceGrid<S>,
    pose: &CameraPose<S>,
    settings: &RenderSettings,
    render_seed: u64,
    weight: impl Fn(usize) -> f64,
    query: impl FnOnce(&[S]) -> Result<SdsQuery<S>>,
) -> Result<(Vec<Vec<S>>, SdsQuery<S>)> {
    let mut tape = Tape::new();
    let vars = grid.params.bind(&mut tape);
    let x = render_image(grid, &mut tape, &vars, pose, settings, render_seed)?;
    let signed: Vec<S> = tape.value(x).data().iter().map(|&v| S::from_f64_lossy(2.0) * v - S::one()).collect();
    let q = query(&signed)?;
    let w = S::from_f64_lossy(2.0 * weight(q.t));
    let seed: Vec<S> = q.eps_hat.iter().zip(&q.eps).map(|(&a, &b)| w * (a - b)).collect();
    let mut grads = tape.backward_from(x, seed)?;
    Ok((grid.params.collect_grads(&vars, &mut grads), q))
}

/// One score-distillation update at `pose`: render, noise to a random
/// `t`, query the guided prior (treated as constant) and apply
/// `w(t) (eps_hat - eps)` through the render.
pub fn sds_step<S: Scalar, P: EpsPredictor<S> + ?Sized>(
    field: &mut FieldOptimizer<S>,
    model: &P,
    pose: &CameraPose<S>,
    config: &LiftConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RoundRecord> {
    let start = Instant::now();
    let schedule = model.schedule();
    let (lo, hi) = config.sds_range(schedule.timesteps());
    let t = rng.random_range(lo..=hi);
    let settings = config.render_settings(model.resolution());
    let render_seed = rng.random::<u64>();
    let eps: Vec<S> = gaussian(model.image_len(), rng);
    let cond = Condition { class: Some(config.class_id), orientation: pose.orientation };
    let scale = S::from_f64_lossy(config.guidance_scale);
    let (grads, q) = sds_gradient(
        &field.grid,
        pose,
        &settings,
        render_seed,
        |t| 1.0 - schedule.alpha_bar(t),
        |x0| {
            let x_t = forward_noise(x0, t, &eps, schedule)?;
            let eps_hat = guided_eps(model, &x_t, &[t], &[cond], scale)?;
            Ok(SdsQuery { t, eps, eps_hat })
        },
    )?;
    let loss = q.eps_hat.iter().zip(&q.eps).map(|(&a, &b)| (a - b).to_f64_lossy().powi(2)).sum::<f64>() / q.eps.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("score residual became {loss}")));
    }
    field.apply(&grads)?;
    Ok(RoundRecord { t_cur: t, step: 0, fwd_evals: 0, bwd_evals: 0, field_updates: 1, wall_ms: elapsed_ms(start), loss })
}

/// Clean target for a decoupled round: noise `x0` to `t_cur`, run DDIM down
/// to `max(t_cur - step, 0)` and decode the clean estimate from the last
/// noise prediction, clamped to `[-1, 1]`.
pub fn dbp_target<S: Scalar, P: EpsPredictor<S> + ?Sized>(
    model: &P,
    x0: &[S],
    cond: Condition<S>,
    state: DbpState,
    stride: Option<usize>,
    guidance: f64,
    eps: &[S],
) -> Result<Vec<S>> {
    let schedule = model.schedule();
    let t_end = state.t_cur.saturating_sub(state.step_cur);
    let stride = stride.unwrap_or(state.step_cur).max(1);
    let scale = S::from_f64_lossy(guidance);
    let mut t = state.t_cur;
    let mut x = forward_noise(x0, t, eps, schedule)?;
    loop {
        let eps_hat = guided_eps(model, &x, &[t], &[cond], scale)?;
        let next = t.saturating_sub(stride).max(t_end);
        if next == t_end {
            let lim = S::one();
            return Ok(predict_x0(&x, t, &eps_hat, schedule).into_iter().map(|v| v.max(-lim).min(lim)).collect());
        }
        x = ddim_step(&x, t, next, &eps_hat, schedule)?;
        t = next;
    }
}

/// `updates` Adam steps on the mean squared error between the render at
/// `pose` and `target` (`[0, 1]` colors). Returns the loss of the first step.
pub fn fit_target<S: Scalar>(
    field: &mut FieldOptimizer<S>,
    pose: &CameraPose<S>,
    target: &[S],
    settings: &RenderSettings,
    updates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut first = f64::NAN;
    for i in 0..updates {
        let mut tape = Tape::new();
        let vars = field.grid.params.bind(&mut tape);
        let x = render_image(&field.grid, &mut tape, &vars, pose, settings, rng.random::<u64>())?;
        let tgt = tape.constant(Tensor::new(tape.shape(x).to_vec(), target.to_vec())?);
        let loss = tape.mse(x, tgt)?;
        let value = tape.value(loss).data()[0].to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("field loss became {value}")));
        }
        if i == 0 {
            first = value;
        }
        let mut grads = tape.backward(loss)?;
        let g = field.grid.params.collect_grads(&vars, &mut grads);
        field.apply(&g)?;
    }
    Ok(first)
}

/// One decoupled round at `pose`: one DDIM jump from the current render to
/// a clean target, then `M` MSE updates of the field against it.
pub fn dbp_round<S: Scalar, P: EpsPredictor<S> + ?Sized>(
    field: &mut FieldOptimizer<S>,
    model: &P,
    pose: &CameraPose<S>,
    state: DbpState,
    config: &LiftConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RoundRecord> {
    let start = Instant::now();
    model.schedule().check_timestep(state.t_cur)?;
    let settings = config.render_settings(model.resolution());
    let x = crate::radiancefield::render_image_values(&field.grid, pose, &settings, rng.random::<u64>())?;
    let x0: Vec<S> = x.to_signed().into_iter().map(S::from_f64_lossy).collect();
    let eps: Vec<S> = gaussian(model.image_len(), rng);
    let cond = Condition { class: Some(config.class_id), orientation: pose.orientation };
    let guidance = if config.dbp.guided { config.guidance_scale } else { 1.0 };
    let target = dbp_target(model, &x0, cond, state, config.dbp.stride, guidance, &eps)?;
    let half = S::from_f64_lossy(0.5);
    let target: Vec<S> = target.into_iter().map(|v| (v + S::one()) * half).collect();
    let loss = fit_target(field, pose, &target, &settings, config.dbp.inner_updates, rng)?;
    Ok(RoundRecord {
        t_cur: state.t_cur,
        step: state.step_cur,
        fwd_evals: 0,
        bwd_evals: 0,
        field_updates: config.dbp.inner_updates as u64,
        wall_ms: elapsed_ms(start),
        loss,
    })
}

/// Directly supervised fit of a fresh field to posed views: each step
/// takes one random view and one MSE update.
pub fn fit_views<S: Scalar>(
    grid: &GridConfig,
    views: &[(CameraPose<S>, Image)],
    settings: &RenderSettings,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<RadianceGrid<S>> {
    if views.is_empty() {
        return Err(Error::InvalidInput("supervised fit needs at least one view".into()));
    }
    let mut field = FieldOptimizer::new(RadianceGrid::new(grid)?, lr);
    let targets: Vec<Vec<S>> = views.iter().map(|(_, im)| im.data.iter().map(|&v| S::from_f64_lossy(v)).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..steps {
        let i = rng.random_range(0..views.len());
        fit_target(&mut field, &views[i].0, &targets[i], settings, 1, &mut rng)?;
    }
    Ok(field.grid)
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Runs `config.total_rounds` rounds from a fresh field. Forward evaluations
/// are counted by wrapping `model`; `on_round` sees every record and the
/// field after it and may stop the run early by returning `false`.
pub fn lift<S: Scalar, P: EpsPredictor<S>>(
    model: &P,
    config: &LiftConfig,
    mut on_round: impl FnMut(usize, &RoundRecord, &RadianceGrid<S>) -> Result<bool>,
) -> Result<(RadianceGrid<S>, RunLog)> {
    let timesteps = model.schedule().timesteps();
    config.validate(timesteps)?;
    let counted = CountingPredictor::new(model);
    let mut field = FieldOptimizer::new(RadianceGrid::new(&config.grid)?, config.lr);
    let mut log = RunLog::default();
    for round in 0..config.total_rounds {
        let mut rng = round_rng(config.seed, round);
        let pose = sample_camera(&config.camera, &mut rng)?.cast::<S>();
        let before = counted.forward_evals();
        let mut rec = match config.mode {
            LiftMode::Sds => sds_step(&mut field, &counted, &pose, config, &mut rng)?,
            LiftMode::Dbp => dbp_round(&mut field, &counted, &pose, anneal_schedule(round, config, timesteps), config, &mut rng)?,
        };
        rec.fwd_evals = counted.forward_evals() - before;
        log.push(rec);
        if !on_round(round, &rec, &field.grid)? {
            break;
        }
    }
    Ok((field.grid, log))
}

pub const GRID_FILE: &str = "grid.ograd";
pub const RUNLOG_FILE: &str = "runlog.json";
pub const TURNTABLE_DIR: &str = "turntable";

pub fn turntable_file_name(i: usize) -> String {
    format!("view_{i:03}.ppm")
}

/// Turntable of `grid` as configured for lifting outputs.
pub fn lift_turntable<S: Scalar>(grid: &RadianceGrid<S>, config: &LiftConfig, resolution: usize) -> Result<Vec<Image>> {
    let settings = config.render_settings(resolution);
    turntable(grid, config.turntable_views, config.turntable_elevation_deg.to_radians(), config.camera.radius, &settings)
}

/// Writes the grid checkpoint, the run log and the turntable frames to `out`.
pub fn write_lift_outputs<S: Scalar>(out: &Path, grid: &RadianceGrid<S>, log: &RunLog, frames: &[Image]) -> Result<()> {
    let tdir = out.join(TURNTABLE_DIR);
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    grid.save(&out.join(GRID_FILE))?;
    let p = out.join(RUNLOG_FILE);
    fs::write(&p, log.to_json()).map_err(|e| Error::io(&p, e))?;
    for (i, f) in frames.iter().enumerate() {
        f.write_ppm(&tdir.join(turntable_file_name(i)))?;
    }
    Ok(())
}

/// Loads the prior at `checkpoint`, lifts `config.class_id` and persists
/// the outputs under `out`. `ablate_pose` zeroes the prior's pose projection.
pub fn run_lift(checkpoint: &Path, config: &LiftConfig, ablate_pose: bool, out: &Path) -> Result<(RadianceGrid<f64>, RunLog)> {
    let mut model: Denoiser<f64> = load_denoiser(checkpoint)?;
    if config.class_id >= model.config.classes {
        return Err(Error::InvalidConfig(format!("class {} outside 0..{}", config.class_id, model.config.classes)));
    }
    if ablate_pose {
        model = model.pose_ablated();
    }
    let (grid, log) = lift(&model, config, |_, _, _| Ok(true))?;
    let frames = lift_turntable(&grid, config, model.config.resolution)?;
    write_lift_outputs(out, &grid, &log, &frames)?;
    Ok((grid, log))
}
