//! Dense feature-grid radiance field with a small decoder and
//! differentiable volume rendering.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::quatpose::{uniform_hemisphere_poses, CameraPose};
use crate::scalar::Scalar;
use crate::tensorgrad::{load_checkpoint, save_checkpoint, CompositePlan, GatherPlan, ParamSet, Tape, Tensor, Var};

pub const DECODER_HIDDEN: usize = 16;
/// Initial density the decoder bias is tuned to.
pub const INITIAL_DENSITY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub resolution: usize,
    pub features: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { resolution: 32, features: 8, init_std: 0.01, seed: 0 }
    }
}

/// Features on the `R^3` nodes of `[-1, 1]^3` plus a `F -> 16 -> 4` decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceGrid<S> {
    pub resolution: usize,
    pub features: usize,
    pub params: ParamSet<S>,
}

pub const FEATURES: usize = 0;
pub const DEC0_W: usize = 1;
pub const DEC0_B: usize = 2;
pub const DEC1_W: usize = 3;
pub const DEC1_B: usize = 4;
const PARAM_NAMES: [&str; 5] = ["features", "dec0.w", "dec0.b", "dec1.w", "dec1.b"];

fn normal_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape, (0..n).map(|_| S::from_f64_lossy(dist.sample(rng))).collect()).expect("finite init")
}

/// `softplus^{-1}(y) = ln(e^y - 1)`.
pub fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl<S: Scalar> RadianceGrid<S> {
    pub fn new(config: &GridConfig) -> Result<Self> {
        let (r, f) = (config.resolution, config.features);
        if r < 2 || f == 0 {
            return Err(Error::InvalidConfig("grid needs resolution >= 2 and at least one feature".into()));
        }
        if !(config.init_std >= 0.0) {
            return Err(Error::InvalidConfig("init_std must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        params.insert(PARAM_NAMES[FEATURES], normal_tensor(&mut rng, vec![r * r * r, f], config.init_std));
        params.insert(PARAM_NAMES[DEC0_W], normal_tensor(&mut rng, vec![f, DECODER_HIDDEN], (2.0 / f as f64).sqrt()));
        params.insert(PARAM_NAMES[DEC0_B], Tensor::zeros(vec![DECODER_HIDDEN]));
        params.insert(PARAM_NAMES[DEC1_W], normal_tensor(&mut rng, vec![DECODER_HIDDEN, 4], (1.0 / DECODER_HIDDEN as f64).sqrt()));
        let mut b1 = vec![S::zero(); 4];
        b1[0] = S::from_f64_lossy(inverse_softplus(INITIAL_DENSITY));
        params.insert(PARAM_NAMES[DEC1_B], Tensor::new(vec![4], b1)?);
        Ok(Self { resolution: r, features: f, params })
    }

    /// Wraps loaded parameters, inferring the grid size from their shapes.
    pub fn from_params(params: ParamSet<S>) -> Result<Self> {
        let names: Vec<&str> = params.names().iter().map(String::as_str).collect();
        if names != PARAM_NAMES {
            return Err(Error::InvalidInput(format!("unexpected grid parameters {names:?}")));
        }
        let fshape = params.tensors()[FEATURES].shape().to_vec();
        let f = *fshape.get(1).unwrap_or(&0);
        let r = (fshape[0] as f64).cbrt().round() as usize;
        let ok = fshape.len() == 2
            && r * r * r == fshape[0]
            && params.tensors()[DEC0_W].shape() == [f, DECODER_HIDDEN]
            && params.tensors()[DEC0_B].shape() == [DECODER_HIDDEN]
            && params.tensors()[DEC1_W].shape() == [DECODER_HIDDEN, 4]
            && params.tensors()[DEC1_B].shape() == [4];
        if !ok {
            return Err(Error::ShapeMismatch("grid parameter shapes are inconsistent".into()));
        }
        Ok(Self { resolution: r, features: f, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(load_checkpoint(path)?)
    }

    /// Flat feature-table row of node `(i, j, k)`.
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    /// World position of node `(i, j, k)`.
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> [S; 3] {
        let step = 2.0 / (self.resolution - 1) as f64;
        [i, j, k].map(|n| S::from_f64_lossy(-1.0 + step * n as f64))
    }

    /// The 8 trilinear corners of `p`, or `None` outside the box.
    pub fn corners(&self, p: [S; 3]) -> Option<([usize; 8], [S; 8])> {
        if p.iter().any(|c| !c.is_finite() || c.abs() > S::one()) {
            return None;
        }
        let r = self.resolution;
        let scale = S::from_usize_lossy(r - 1) * S::from_f64_lossy(0.5);
        let mut base = [0usize; 3];
        let mut frac = [S::zero(); 3];
        for a in 0..3 {
            let u = (p[a] + S::one()) * scale;
            let i = u.floor().to_usize().unwrap_or(0).min(r - 2);
            base[a] = i;
            frac[a] = u - S::from_usize_lossy(i);
        }
        let mut idx = [0usize; 8];
        let mut w = [S::zero(); 8];
        for c in 0..8 {
            let (di, dj, dk) = ((c >> 2) & 1, (c >> 1) & 1, c & 1);
            idx[c] = self.node_index(base[0] + di, base[1] + dj, base[2] + dk);
            let pick = |d: usize, f: S| if d == 1 { f } else { S::one() - f };
            w[c] = pick(di, frac[0]) * pick(dj, frac[1]) * pick(dk, frac[2]);
        }
        Some((idx, w))
    }

    /// Gather plan and inside mask for a batch of points.
    pub fn point_plan(&self, points: &[[S; 3]]) -> (GatherPlan<S>, Vec<S>) {
        let mut indices = Vec::with_capacity(points.len() * 8);
        let mut weights = Vec::with_capacity(points.len() * 8);
        let mut mask = Vec::with_capacity(points.len());
        for &p in points {
            match self.corners(p) {
                Some((i, w)) => {
                    indices.extend(i);
                    weights.extend(w);
                    mask.push(S::one());
                }
                None => {
                    indices.extend([0; 8]);
                    weights.extend([S::zero(); 8]);
                    mask.push(S::zero());
                }
            }
        }
        (GatherPlan { rows: points.len(), k: 8, indices, weights }, mask)
    }

    /// Records density `[n, 1]` and color `[n, 3]` for `points` on the tape.
    pub fn query_tape(&self, tape: &mut Tape<S>, vars: &[Var], points: &[[S; 3]]) -> Result<(Var, Var)> {
        if points.is_empty() {
            return Err(Error::InvalidInput("no query points".into()));
        }
        let (plan, mask) = self.point_plan(points);
        let n = points.len();
        let feat = tape.gather(vars[FEATURES], Arc::new(plan))?;
        let h = tape.matmul(feat, vars[DEC0_W])?;
        let h = tape.add(h, vars[DEC0_B])?;
        let h = tape.silu(h);
        let o = tape.matmul(h, vars[DEC1_W])?;
        let o = tape.add(o, vars[DEC1_B])?;
        let raw_sigma = tape.slice_cols(o, 0, 1)?;
        let sigma = tape.softplus(raw_sigma);
        let mask = tape.constant(Tensor::new(vec![n, 1], mask)?);
        let sigma = tape.mul(sigma, mask)?;
        let raw_rgb = tape.slice_cols(o, 1, 4)?;
        let rgb = tape.sigmoid(raw_rgb);
        Ok((sigma, rgb))
    }

    /// Density and color at `p`. Outside the box the density is 0 and the
    /// color is `background`.
    pub fn query_point(&self, p: [S; 3], background: [S; 3]) -> (S, [S; 3]) {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (s, c) = self.query_tape(&mut tape, &vars, &[p]).expect("one point");
        if self.corners(p).is_none() {
            return (S::zero(), background);
        }
        let c = tape.value(c).data();
        (tape.value(s).data()[0], [c[0], c[1], c[2]])
    }
}

/// Ray sampling and image settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub height: usize,
    pub width: usize,
    /// Jitter sample positions inside their strata; otherwise use midpoints.
    pub stratified: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self::for_radius(2.0, 16)
    }
}

impl RenderSettings {
    /// Near and far planes bracketing the `[-1, 1]^3` box for a camera at
    /// distance `radius`.
    pub fn for_radius(radius: f64, resolution: usize) -> Self {
        let half_diag = 3f64.sqrt();
        Self {
            samples: 48,
            near: (radius - half_diag).max(1e-3),
            far: radius + half_diag,
            background: [1.0; 3],
            height: resolution,
            width: resolution,
            stratified: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || !(self.near < self.far) || self.near < 0.0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("render settings need samples >= 2, 0 <= near < far and a nonempty image".into()));
        }
        Ok(())
    }
}

/// Sample distances and interval lengths for `rays` rays. The last interval
/// ends at `far`.
pub fn ray_samples<S: Scalar>(settings: &RenderSettings, rays: usize, seed: u64) -> (Vec<S>, Vec<S>) {
    let n = settings.samples;
    let width = (settings.far - settings.near) / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts = Vec::with_capacity(rays * n);
    let mut deltas = Vec::with_capacity(rays * n);
    for _ in 0..rays {
        let row: Vec<f64> = (0..n)
            .map(|i| {
                let u = if settings.stratified { rng.random::<f64>() } else { 0.5 };
                settings.near + (i as f64 + u) * width
            })
            .collect();
        for i in 0..n {
            let next = if i + 1 < n { row[i + 1] } else { settings.far };
            ts.push(S::from_f64_lossy(row[i]));
            deltas.push(S::from_f64_lossy(next - row[i]));
        }
    }
    (ts, deltas)
}

/// Composited colors `[rays.len(), 3]` on the tape.
pub fn render_rays<S: Scalar>(
    grid: &RadianceGrid<S>,
    tape: &mut Tape<S>,
    vars: &[Var],
    rays: &[([S; 3], [S; 3])],
    settings: &RenderSettings,
    seed: u64,
) -> Result<Var> {
    settings.validate()?;
    let n = settings.samples;
    let (ts, deltas) = ray_samples::<S>(settings, rays.len(), seed);
    let mut points = Vec::with_capacity(rays.len() * n);
    for (r, (o, d)) in rays.iter().enumerate() {
        for i in 0..n {
            let t = ts[r * n + i];
            points.push([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
        }
    }
    let (sigma, rgb) = grid.query_tape(tape, vars, &points)?;
    let plan = CompositePlan { rays: rays.len(), samples: n, deltas, background: settings.background.map(S::from_f64_lossy) };
    tape.composite(sigma, rgb, Arc::new(plan))
}

/// Color of a single ray.
pub fn render_ray<S: Scalar>(
    grid: &RadianceGrid<S>,
    origin: [S; 3],
    direction: [S; 3],
    settings: &RenderSettings,
    seed: u64,
) -> Result<[S; 3]> {
    let mut tape = Tape::new();
    let vars = grid.params.bind_frozen(&mut tape);
    let out = render_rays(grid, &mut tape, &vars, &[(origin, direction)], settings, seed)?;
    let c = tape.value(out).data();
    Ok([c[0], c[1], c[2]])
}

/// Primary rays of `pose`, row-major.
pub fn camera_rays<S: Scalar>(pose: &CameraPose<S>, height: usize, width: usize) -> Vec<([S; 3], [S; 3])> {
    let mut rays = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            rays.push((pose.position, pose.ray_direction(r, c, height, width)));
        }
    }
    rays
}

/// Differentiable render of `pose`: `[H * W, 3]` in `[0, 1]`, row-major.
pub fn render_image<S: Scalar>(
    grid: &RadianceGrid<S>,
    tape: &mut Tape<S>,
    vars: &[Var],
    pose: &CameraPose<S>,
    settings: &RenderSettings,
    seed: u64,
) -> Result<Var> {
    let rays = camera_rays(pose, settings.height, settings.width);
    render_rays(grid, tape, vars, &rays, settings, seed)
}

/// Values-only render of `pose`.
pub fn render_image_values<S: Scalar>(grid: &RadianceGrid<S>, pose: &CameraPose<S>, settings: &RenderSettings, seed: u64) -> Result<Image> {
    let mut tape = Tape::new();
    let vars = grid.params.bind_frozen(&mut tape);
    let out = render_image(grid, &mut tape, &vars, pose, settings, seed)?;
    let data = tape.value(out).data().iter().map(|v| v.to_f64_lossy()).collect();
    Image::new(settings.height, settings.width, data)
}

/// `k` views at evenly spaced azimuths, fixed elevation and radius. Rendered
/// with midpoint samples so the result does not depend on a seed.
pub fn turntable<S: Scalar>(grid: &RadianceGrid<S>, k: usize, elevation: f64, radius: f64, settings: &RenderSettings) -> Result<Vec<Image>> {
    let poses = uniform_hemisphere_poses(k, S::from_f64_lossy(elevation), S::from_f64_lossy(radius))?;
    let fixed = RenderSettings { stratified: false, ..settings.clone() };
    poses.iter().map(|p| render_image_values(grid, p, &fixed, 0)).collect()
}

/// Per-sample compositing weights and the residual transmittance.
pub fn composite_weights(sigma: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut w = Vec::with_capacity(sigma.len());
    for (s, d) in sigma.iter().zip(deltas) {
        let decay = (-s * d).exp();
        w.push(t * (1.0 - decay));
        t *= decay;
    }
    (w, t)
}
