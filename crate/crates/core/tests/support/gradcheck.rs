//! Central finite-difference checks of every differentiable operation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use orient_core::conddiffusion::{make_schedule, Condition, Denoiser, DenoiserConfig};
use orient_core::quatpose::pose_from_spherical;
use orient_core::radiancefield::{render_image, render_rays, GridConfig, RadianceGrid, RenderSettings};
use orient_core::tensorgrad::{CompositePlan, GatherPlan, Tape, Tensor, Var};

const H: f64 = 1e-6;

pub const OP_TOL: f64 = 1e-5;
pub const IMAGE_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

/// Worst relative error of one check over all seeds.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tol
    }
}

/// `|a - b| / max(|a|, |b|)` over whole gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks the gradient of `<build(inputs), w>` with respect to every input.
fn check_tape_op(seed: u64, shapes: &[Vec<usize>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| normals(&mut rng, s.iter().product())).collect();
    let eval = |inputs: &[Vec<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes.iter().zip(inputs).map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap().with_grad())).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (mut tape, vars, out) = eval(&inputs);
    let w = normals(&mut rng, tape.value(out).len());
    let grads = tape.backward_from(out, w.clone()).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        analytic.extend(g);
        for k in 0..inputs[i].len() {
            let f = |delta: f64| {
                let mut x = inputs.clone();
                x[i][k] += delta;
                let (tape, _, out) = eval(&x);
                dot(tape.value(out).data(), &w)
            };
            numeric.push((f(H) - f(-H)) / (2.0 * H));
        }
    }
    rel_err(&analytic, &numeric)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

fn tape_ops() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    let gather = Arc::new(GatherPlan {
        rows: 4,
        k: 3,
        indices: vec![0, 2, 5, 1, 1, 3, 4, 0, 2, 5, 5, 3],
        weights: vec![0.2, 0.5, 0.3, 1.0, -0.4, 0.7, 0.1, 0.1, 0.8, 0.6, 0.3, 0.1],
    });
    let composite = Arc::new(CompositePlan { rays: 3, samples: 5, deltas: (0..15).map(|i| 0.1 + 0.02 * i as f64).collect(), background: [1.0, 0.5, 0.0] });
    vec![
        ("add", vec![vec![3, 4], vec![4]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![vec![3, 4], vec![4]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1]).unwrap())),
        ("scale", vec![vec![5]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.scale(v[0], -1.7))),
        ("silu", vec![vec![7]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.silu(v[0]))),
        ("softplus", vec![vec![7]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.softplus(v[0]))),
        ("sigmoid", vec![vec![7]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sigmoid(v[0]))),
        ("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.matmul(v[0], v[1]).unwrap())),
        (
            "reduce",
            vec![vec![2, 3, 4]],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let a = t.reduce(orient_core::tensorgrad::ReduceKind::Sum, v[0], &[0, 2]).unwrap();
                let b = t.reduce(orient_core::tensorgrad::ReduceKind::Mean, v[0], &[1]).unwrap();
                let (sa, sb) = (t.sum(a), t.mean(b));
                t.mul(sa, sb).unwrap()
            }),
        ),
        ("mse", vec![vec![3, 4], vec![3, 4]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mse(v[0], v[1]).unwrap())),
        ("gather", vec![vec![6, 3]], Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.gather(v[0], gather.clone()).unwrap())),
        ("embed", vec![vec![5, 3]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.embed(v[0], &[4, 0, 4, 2]).unwrap())),
        ("slice_cols", vec![vec![3, 5]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.slice_cols(v[0], 1, 4).unwrap())),
        (
            "composite",
            vec![vec![15, 1], vec![15, 3]],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let sigma = t.softplus(v[0]);
                t.composite(sigma, v[1], composite.clone()).unwrap()
            }),
        ),
        ("cross_entropy", vec![vec![4, 5]], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap())),
    ]
}

/// Gradient of `<f(params), w>` against central differences of `values`.
fn check_params(
    params: &[Vec<f64>],
    w: &[f64],
    analytic: Vec<f64>,
    coords: &[(usize, usize)],
    values: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut numeric = Vec::with_capacity(coords.len());
    let mut picked = Vec::with_capacity(coords.len());
    let offsets: Vec<usize> = params.iter().scan(0, |acc, p| {
        let o = *acc;
        *acc += p.len();
        Some(o)
    }).collect();
    for &(i, k) in coords {
        let f = |delta: f64| {
            let mut p = params.to_vec();
            p[i][k] += delta;
            dot(&values(&p), w)
        };
        numeric.push((f(H) - f(-H)) / (2.0 * H));
        picked.push(analytic[offsets[i] + k]);
    }
    rel_err(&picked, &numeric)
}

fn all_coords(params: &[Vec<f64>]) -> Vec<(usize, usize)> {
    params.iter().enumerate().flat_map(|(i, p)| (0..p.len()).map(move |k| (i, k))).collect()
}

fn random_grid(seed: u64) -> RadianceGrid<f64> {
    RadianceGrid::new(&GridConfig { resolution: 4, features: 3, init_std: 0.7, seed }).unwrap()
}

fn with_params(grid: &RadianceGrid<f64>, p: &[Vec<f64>]) -> RadianceGrid<f64> {
    let mut g = grid.clone();
    for (t, d) in g.params.tensors_mut().iter_mut().zip(p) {
        t.data_mut().copy_from_slice(d);
    }
    g
}

fn grid_values(grid: &RadianceGrid<f64>) -> Vec<Vec<f64>> {
    grid.params.tensors().iter().map(|t| t.data().to_vec()).collect()
}

/// Analytic parameter gradient of `<out, w>` for a grid computation.
fn grid_analytic(grid: &RadianceGrid<f64>, w: &[f64], build: &dyn Fn(&RadianceGrid<f64>, &mut Tape<f64>, &[Var]) -> Var) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = grid.params.bind(&mut tape);
    let out = build(grid, &mut tape, &vars);
    let mut grads = tape.backward_from(out, w.to_vec()).unwrap();
    grid.params.collect_grads(&vars, &mut grads).concat()
}

fn grid_forward(grid: &RadianceGrid<f64>, build: &dyn Fn(&RadianceGrid<f64>, &mut Tape<f64>, &[Var]) -> Var) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = grid.params.bind_frozen(&mut tape);
    let out = build(grid, &mut tape, &vars);
    tape.value(out).data().to_vec()
}

fn check_grid(seed: u64, out_len: usize, build: &dyn Fn(&RadianceGrid<f64>, &mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let grid = random_grid(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = normals(&mut rng, out_len);
    let analytic = grid_analytic(&grid, &w, build);
    let params = grid_values(&grid);
    check_params(&params, &w, analytic, &all_coords(&params), &|p| grid_forward(&with_params(&grid, p), build))
}

fn check_query_point(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
    let points: Vec<[f64; 3]> = (0..3).map(|_| [0; 3].map(|_: i32| rng.random_range(-0.95..0.95))).collect();
    let grid = random_grid(seed);
    // The tape path is the public point query.
    for (i, p) in points.iter().enumerate() {
        let (s, c) = grid.query_point(*p, [1.0; 3]);
        let sig = grid_forward(&grid, &|g, t, v| g.query_tape(t, v, &points).unwrap().0);
        let rgb = grid_forward(&grid, &|g, t, v| g.query_tape(t, v, &points).unwrap().1);
        assert!((sig[i] - s).abs() < 1e-12 && (0..3).all(|k| (rgb[3 * i + k] - c[k]).abs() < 1e-12));
    }
    let pts = points.clone();
    let sigma = check_grid(seed, 3, &move |g, t, v| g.query_tape(t, v, &pts).unwrap().0);
    let color = check_grid(seed, 9, &move |g, t, v| g.query_tape(t, v, &points).unwrap().1);
    sigma.max(color)
}

fn ray_settings(stratified: bool) -> RenderSettings {
    RenderSettings { samples: 12, height: 4, width: 4, stratified, ..RenderSettings::for_radius(2.5, 4) }
}

fn check_render_ray(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(202));
    let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let el: f64 = rng.random_range(-0.5..0.8);
    let pose = pose_from_spherical(az, el, 2.5).unwrap();
    let dir = pose.ray_direction(1, 2, 4, 4);
    let settings = ray_settings(true);
    let rays = vec![(pose.position, dir)];
    check_grid(seed, 3, &move |g, t, v| render_rays(g, t, v, &rays, &settings, seed).unwrap())
}

fn check_render_image(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(303));
    let pose = pose_from_spherical(rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..0.7), 2.5).unwrap();
    let settings = ray_settings(seed % 2 == 0);
    check_grid(seed, 16 * 3, &move |g, t, v| render_image(g, t, v, &pose, &settings, seed).unwrap())
}

fn check_denoiser(seed: u64) -> f64 {
    let cfg = DenoiserConfig { resolution: 2, classes: 3, cond_dim: 5, hidden: 6, depth: 3, num_frequencies: 2, init_seed: seed };
    let mut model = Denoiser::<f64>::new(cfg, make_schedule(20, 1e-3, 0.2).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(404));
    for name in ["pose_proj", "in.b", "out.b", "block0.b"] {
        for v in model.params.get_mut(name).unwrap().data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let n = 3;
    let x = normals(&mut rng, n * cfg.image_len());
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=20)).collect();
    let conds: Vec<Condition<f64>> = (0..n)
        .map(|i| {
            let q = pose_from_spherical(rng.random_range(0.0..6.28), rng.random_range(0.0..0.8), 2.0).unwrap().orientation;
            if i == 2 { Condition::null(q) } else { Condition::new(rng.random_range(0..3), q) }
        })
        .collect();
    let w = normals(&mut rng, x.len());
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let out = model.forward_tape(&mut tape, &vars, &x, &t, &conds).unwrap();
    let mut grads = tape.backward_from(out, w.clone()).unwrap();
    let analytic = model.params.collect_grads(&vars, &mut grads).concat();
    let params: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| t.data().to_vec()).collect();
    check_params(&params, &w, analytic, &all_coords(&params), &|p| {
        let mut m = model.clone();
        for (t, d) in m.params.tensors_mut().iter_mut().zip(p) {
            t.data_mut().copy_from_slice(d);
        }
        m.forward(&x, &t, &conds).unwrap()
    })
}

/// Runs every check over [`SEEDS`] seeds.
pub fn gradient_suite() -> Vec<GradReport> {
    let worst = |f: &dyn Fn(u64) -> f64| (0..SEEDS).map(f).fold(0.0, f64::max);
    let mut out: Vec<GradReport> = tape_ops()
        .into_iter()
        .map(|(name, shapes, build)| GradReport { name, worst: worst(&|s| check_tape_op(s, &shapes, &*build)), tol: OP_TOL })
        .collect();
    out.push(GradReport { name: "query_point", worst: worst(&check_query_point), tol: OP_TOL });
    out.push(GradReport { name: "render_ray", worst: worst(&check_render_ray), tol: OP_TOL });
    out.push(GradReport { name: "render_image", worst: worst(&check_render_image), tol: IMAGE_TOL });
    out.push(GradReport { name: "denoise_eps", worst: worst(&check_denoiser), tol: OP_TOL });
    out
}
