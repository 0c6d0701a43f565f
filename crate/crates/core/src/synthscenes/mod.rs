//! Procedural multi-view training data: small constructive scenes made of
//! signed-distance primitives, rendered by sphere tracing from known poses.
//!
//! Each class pairs a primitive shape with a color. Every scene also carries
//! two small marker spheres at fixed azimuths so that views of rotationally
//! symmetric objects still differ with camera orientation.

mod dataset;
mod render;

pub use dataset::{build_dataset, sample_labeled_views, AzimuthSampling, DatasetConfig, LabeledView, Manifest, MultiViewDataset};
pub use render::{render_view, sphere_trace, RenderOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of object classes: four shapes in two colors.
pub const NUM_CLASSES: usize = 8;

pub const RED: [f64; 3] = [0.85, 0.15, 0.15];
pub const BLUE: [f64; 3] = [0.15, 0.25, 0.85];
pub const MARKER_YELLOW: [f64; 3] = [0.9, 0.85, 0.1];
pub const MARKER_GREEN: [f64; 3] = [0.1, 0.75, 0.2];
pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box with the given half extents.
    Box { half: [f64; 3] },
    /// Torus around the z axis.
    Torus { major: f64, minor: f64 },
    /// Solid cone along z: base disc of `radius` at `-half_height`, apex at `+half_height`.
    Cone { half_height: f64, radius: f64 },
}

impl Shape {
    /// Exact Euclidean signed distance from a point given relative to the center.
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Sphere { radius } => length3(p) - radius,
            Shape::Box { half } => {
                let q = [p[0].abs() - half[0], p[1].abs() - half[1], p[2].abs() - half[2]];
                let outside = length3([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Shape::Torus { major, minor } => {
                let qx = p[0].hypot(p[1]) - major;
                qx.hypot(p[2]) - minor
            }
            Shape::Cone { half_height: h, radius: r1 } => {
                // Capped cone with bottom radius r1 and top radius 0.
                let r2 = 0.0;
                let q = [p[0].hypot(p[1]), p[2]];
                let k1 = [r2, h];
                let k2 = [r2 - r1, 2.0 * h];
                let cap_r = if q[1] < 0.0 { r1 } else { r2 };
                let ca = [q[0] - q[0].min(cap_r), q[1].abs() - h];
                let k1q = [k1[0] - q[0], k1[1] - q[1]];
                let tt = ((k1q[0] * k2[0] + k1q[1] * k2[1]) / (k2[0] * k2[0] + k2[1] * k2[1])).clamp(0.0, 1.0);
                let cb = [q[0] - k1[0] + k2[0] * tt, q[1] - k1[1] + k2[1] * tt];
                let s = if cb[0] < 0.0 && ca[1] < 0.0 { -1.0 } else { 1.0 };
                s * (ca[0] * ca[0] + ca[1] * ca[1]).min(cb[0] * cb[0] + cb[1] * cb[1]).sqrt()
            }
        }
    }

    /// Radius of a sphere about the center enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } => length3(half),
            Shape::Torus { major, minor } => major + minor,
            Shape::Cone { half_height, radius } => half_height.hypot(radius),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
            Shape::Torus { .. } => "torus",
            Shape::Cone { .. } => "cone",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        self.shape.sdf([p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub class_id: usize,
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

impl SceneSpec {
    pub fn new(class_id: usize, primitives: Vec<Primitive>, background: [f64; 3]) -> Result<Self> {
        let s = Self { class_id, primitives, background };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.background) {
            return Err(Error::InvalidConfig("background channels must lie in [0, 1]".into()));
        }
        for p in &self.primitives {
            if !in_unit(&p.albedo) {
                return Err(Error::InvalidConfig("albedo channels must lie in [0, 1]".into()));
            }
            if length3(p.center) + p.shape.bounding_radius() > 1.0 {
                return Err(Error::InvalidConfig(format!("{} primitive leaves the unit sphere", p.shape.kind_name())));
            }
        }
        Ok(())
    }

    /// Union of all primitives; returns the distance and the closest primitive.
    pub fn sdf_with_index(&self, p: [f64; 3]) -> (f64, Option<usize>) {
        self.primitives
            .iter()
            .enumerate()
            .fold((f64::INFINITY, None), |(best, bi), (i, prim)| {
                let d = prim.sdf(p);
                if d < best {
                    (d, Some(i))
                } else {
                    (best, bi)
                }
            })
    }

    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        self.sdf_with_index(p).0
    }

    /// Canonical scene for `class_id` with per-scene size and marker jitter
    /// taken from `jitter` (three values in `[0, 1)`; all 0.5 means no jitter).
    pub fn for_class(class_id: usize, jitter: [f64; 3]) -> Result<Self> {
        if class_id >= NUM_CLASSES {
            return Err(Error::InvalidConfig(format!("class id {class_id} outside 0..{NUM_CLASSES}")));
        }
        let scale = 0.9 + 0.2 * jitter[0];
        let shape = match class_id / 2 {
            0 => Shape::Sphere { radius: 0.42 * scale },
            1 => Shape::Box { half: [0.3 * scale, 0.3 * scale, 0.3 * scale] },
            2 => Shape::Torus { major: 0.36 * scale, minor: 0.14 * scale },
            _ => Shape::Cone { half_height: 0.4 * scale, radius: 0.38 * scale },
        };
        let albedo = if class_id % 2 == 0 { RED } else { BLUE };
        let spread = (jitter[1] - 0.5) * 20f64.to_radians();
        let dist = 0.66 + 0.08 * jitter[2];
        let marker = |az: f64, color: [f64; 3]| Primitive {
            shape: Shape::Sphere { radius: 0.15 },
            center: [dist * az.cos(), dist * az.sin(), -0.1],
            albedo: color,
        };
        Self::new(
            class_id,
            vec![
                Primitive { shape, center: [0.0; 3], albedo },
                marker(spread, MARKER_YELLOW),
                marker(std::f64::consts::FRAC_PI_2 + spread, MARKER_GREEN),
            ],
            WHITE,
        )
    }
}

/// Signed distance of the scene at `p`; negative inside.
pub fn sdf_eval(scene: &SceneSpec, p: [f64; 3]) -> f64 {
    scene.sdf(p)
}

pub(crate) fn length3(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub fn class_name(class_id: usize) -> String {
    let shape = ["sphere", "box", "torus", "cone"].get(class_id / 2).copied().unwrap_or("unknown");
    let color = if class_id % 2 == 0 { "red" } else { "blue" };
    format!("{color} {shape}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, TAU};

    fn sphere_scene(radius: f64) -> SceneSpec {
        SceneSpec::new(0, vec![Primitive { shape: Shape::Sphere { radius }, center: [0.0; 3], albedo: RED }], WHITE).unwrap()
    }

    #[test]
    fn sphere_distance_closed_form() {
        let s = sphere_scene(0.5);
        assert_eq!(sdf_eval(&s, [1.0, 0.0, 0.0]), 0.5);
        assert!(sdf_eval(&s, [0.0, 0.3, 0.4]).abs() < 1e-9);
        assert!(sdf_eval(&s, [0.0; 3]) < 0.0);
    }

    #[test]
    fn points_on_surfaces_have_zero_distance() {
        let cases = [
            (Shape::Box { half: [0.2, 0.3, 0.4] }, [0.2, 0.1, -0.3]),
            (Shape::Torus { major: 0.4, minor: 0.1 }, [0.5, 0.0, 0.0]),
            (Shape::Cone { half_height: 0.4, radius: 0.3 }, [0.0, 0.0, 0.4]),
            (Shape::Cone { half_height: 0.4, radius: 0.3 }, [0.1, 0.0, -0.4]),
        ];
        for (shape, p) in cases {
            assert!(shape.sdf(p).abs() < 1e-9, "{shape:?} at {p:?}: {}", shape.sdf(p));
        }
    }

    #[test]
    fn validation_rejects_escaping_primitives_and_bad_colors() {
        let far = Primitive { shape: Shape::Sphere { radius: 0.3 }, center: [0.8, 0.0, 0.0], albedo: RED };
        assert!(SceneSpec::new(0, vec![far], WHITE).is_err());
        let ok = Primitive { shape: Shape::Sphere { radius: 0.3 }, center: [0.0; 3], albedo: [1.2, 0.0, 0.0] };
        assert!(SceneSpec::new(0, vec![ok], WHITE).is_err());
        assert!(SceneSpec::for_class(NUM_CLASSES, [0.5; 3]).is_err());
        for c in 0..NUM_CLASSES {
            for j in [[0.0; 3], [0.999; 3]] {
                SceneSpec::for_class(c, j).unwrap();
            }
        }
    }

    /// Deterministic surface point clouds used as a brute-force distance oracle.
    fn surface_points(prim: &Primitive, n: usize) -> Vec<[f64; 3]> {
        let side = (n as f64).sqrt().ceil() as usize;
        let grid = |i: usize| (i as f64 + 0.5) / side as f64;
        let c = prim.center;
        let shift = |p: [f64; 3]| [p[0] + c[0], p[1] + c[1], p[2] + c[2]];
        let mut pts = Vec::with_capacity(side * side);
        match prim.shape {
            Shape::Sphere { radius } => {
                for i in 0..side {
                    for j in 0..side {
                        let z = 2.0 * grid(i) - 1.0;
                        let phi = TAU * grid(j);
                        let r = (1.0 - z * z).sqrt();
                        pts.push(shift([radius * r * phi.cos(), radius * r * phi.sin(), radius * z]));
                    }
                }
            }
            Shape::Torus { major, minor } => {
                for i in 0..side {
                    for j in 0..side {
                        let (u, v) = (TAU * grid(i), TAU * grid(j));
                        let ring = major + minor * v.cos();
                        pts.push(shift([ring * u.cos(), ring * u.sin(), minor * v.sin()]));
                    }
                }
            }
            Shape::Box { half } => {
                let per_face = side / 3 + 1;
                for axis in 0..3 {
                    for sign in [-1.0, 1.0] {
                        for i in 0..per_face {
                            for j in 0..per_face {
                                let a = 2.0 * (i as f64 / (per_face - 1) as f64) - 1.0;
                                let b = 2.0 * (j as f64 / (per_face - 1) as f64) - 1.0;
                                let mut p = [0.0; 3];
                                p[axis] = sign * half[axis];
                                p[(axis + 1) % 3] = a * half[(axis + 1) % 3];
                                p[(axis + 2) % 3] = b * half[(axis + 2) % 3];
                                pts.push(shift(p));
                            }
                        }
                    }
                }
            }
            Shape::Cone { half_height, radius } => {
                let lateral = side * 3 / 4;
                for i in 0..lateral {
                    for j in 0..side {
                        let s = i as f64 / (lateral - 1) as f64;
                        let phi = TAU * grid(j);
                        let r = radius * (1.0 - s);
                        let z = -half_height + 2.0 * half_height * s;
                        pts.push(shift([r * phi.cos(), r * phi.sin(), z]));
                    }
                }
                for i in 0..side / 2 {
                    for j in 0..side {
                        let r = radius * (i as f64 / (side / 2 - 1) as f64);
                        let phi = TAU * grid(j);
                        pts.push(shift([r * phi.cos(), r * phi.sin(), -half_height]));
                    }
                }
            }
        }
        pts
    }

    #[test]
    fn union_distance_matches_brute_force_surface_sampling() {
        let scene = SceneSpec::new(
            3,
            vec![
                Primitive { shape: Shape::Sphere { radius: 0.25 }, center: [0.4, 0.1, 0.0], albedo: RED },
                Primitive { shape: Shape::Box { half: [0.15, 0.2, 0.1] }, center: [-0.3, 0.2, 0.1], albedo: BLUE },
                Primitive { shape: Shape::Torus { major: 0.25, minor: 0.07 }, center: [0.0, -0.4, 0.2], albedo: RED },
                Primitive { shape: Shape::Cone { half_height: 0.2, radius: 0.2 }, center: [0.0, 0.3, -0.5], albedo: BLUE },
            ],
            WHITE,
        )
        .unwrap();
        let cloud: Vec<[f64; 3]> = scene.primitives.iter().flat_map(|p| surface_points(p, 400_000)).collect();
        assert!(cloud.len() >= 1_000_000);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 40 {
            let r = rng.random_range(1.3..2.0);
            let theta = rng.random_range(0.0..PI);
            let phi = rng.random_range(0.0..TAU);
            let p = [r * theta.sin() * phi.cos(), r * theta.sin() * phi.sin(), r * theta.cos()];
            let brute = cloud
                .iter()
                .map(|q| length3([p[0] - q[0], p[1] - q[1], p[2] - q[2]]))
                .fold(f64::INFINITY, f64::min);
            let d = sdf_eval(&scene, p);
            assert!((d - brute).abs() <= 1e-3, "at {p:?}: sdf {d} vs brute force {brute}");
            checked += 1;
        }
    }
}
