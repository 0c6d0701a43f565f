use super::{length3, SceneSpec};
use crate::image::Image;
use crate::quatpose::CameraPose;

pub const MAX_TRACE_STEPS: usize = 128;
pub const HIT_THRESHOLD: f64 = 1e-4;
pub const AMBIENT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Direction towards the light; normalized before use.
    pub light_dir: [f64; 3],
    pub ambient: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { light_dir: [1.0, 1.0, 1.0], ambient: AMBIENT }
    }
}

/// Marches `origin + t * dir` until the scene distance drops below the hit
/// threshold. Returns the hit parameter `t`.
pub fn sphere_trace(scene: &SceneSpec, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    // Primitives live inside the unit sphere; skip the empty space before it.
    let dist0 = length3(origin);
    let mut t = (dist0 - 1.0).max(0.0);
    let t_max = dist0 + 1.0;
    for _ in 0..MAX_TRACE_STEPS {
        let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
        let d = scene.sdf(p);
        if d < HIT_THRESHOLD {
            return Some(t);
        }
        t += d;
        if t > t_max {
            return None;
        }
    }
    None
}

fn normal_at(scene: &SceneSpec, p: [f64; 3]) -> [f64; 3] {
    const H: f64 = 1e-6;
    let mut n = [0.0; 3];
    for (axis, slot) in n.iter_mut().enumerate() {
        let mut a = p;
        let mut b = p;
        a[axis] += H;
        b[axis] -= H;
        *slot = scene.sdf(a) - scene.sdf(b);
    }
    let len = length3(n);
    n.map(|c| c / len)
}

pub(crate) fn shade(albedo: [f64; 3], normal: [f64; 3], opts: &RenderOptions) -> [f64; 3] {
    let l = opts.light_dir;
    let ll = length3(l);
    let lambert = ((normal[0] * l[0] + normal[1] * l[1] + normal[2] * l[2]) / ll).max(0.0);
    let k = opts.ambient + lambert;
    albedo.map(|a| (a * k).clamp(0.0, 1.0))
}

/// Sphere-traced Lambertian render of `scene` seen from `pose`.
pub fn render_view(scene: &SceneSpec, pose: &CameraPose<f64>, height: usize, width: usize, opts: &RenderOptions) -> Image {
    let mut img = Image::filled(height, width, scene.background);
    for row in 0..height {
        for col in 0..width {
            let dir = pose.ray_direction(row, col, height, width);
            let o = pose.position;
            if let Some(t) = sphere_trace(scene, o, dir) {
                let p = [o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]];
                let (_, idx) = scene.sdf_with_index(p);
                let albedo = idx.map_or(scene.background, |i| scene.primitives[i].albedo);
                img.set_pixel(row, col, shade(albedo, normal_at(scene, p), opts));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quatpose::pose_from_spherical;
    use crate::synthscenes::{Primitive, Shape, BLUE, RED, WHITE};

    fn centered_sphere() -> SceneSpec {
        SceneSpec::new(0, vec![Primitive { shape: Shape::Sphere { radius: 0.5 }, center: [0.0; 3], albedo: RED }], WHITE)
            .unwrap()
    }

    #[test]
    fn missed_rays_show_background_exactly() {
        let scene = centered_sphere();
        let pose = pose_from_spherical(0.3, 0.2, 2.0).unwrap();
        let img = render_view(&scene, &pose, 16, 16, &RenderOptions::default());
        assert_eq!(img.pixel(0, 0), WHITE);
        assert_eq!(img.pixel(15, 15), WHITE);
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn center_pixel_matches_analytic_ray_sphere_intersection() {
        let scene = centered_sphere();
        let opts = RenderOptions::default();
        for (az, el) in [(0.0, 0.0), (1.1, 0.4), (3.5, -0.3)] {
            let pose = pose_from_spherical(az, el, 2.0).unwrap();
            let (h, w) = (16, 16);
            let img = render_view(&scene, &pose, h, w, &opts);
            let (r, c) = (h / 2, w / 2);
            let d = pose.ray_direction(r, c, h, w);
            let o = pose.position;
            // |o + t d|^2 = R^2 with |d| = 1
            let b = o[0] * d[0] + o[1] * d[1] + o[2] * d[2];
            let cc = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - 0.25;
            let t = -b - (b * b - cc).sqrt();
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let n = p.map(|v| v / 0.5);
            let l = 1.0 / 3f64.sqrt();
            let k = 0.2 + ((n[0] + n[1] + n[2]) * l).max(0.0);
            let want = RED.map(|a| (a * k).min(1.0));
            let got = img.pixel(r, c);
            for ch in 0..3 {
                assert!((got[ch] - want[ch]).abs() <= 1e-4, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn mirrored_scene_and_camera_give_mirrored_image() {
        // Symmetric about the xz-plane, lit from within that plane.
        let scene = SceneSpec::new(
            1,
            vec![
                Primitive { shape: Shape::Box { half: [0.2, 0.3, 0.25] }, center: [0.2, 0.0, 0.0], albedo: BLUE },
                Primitive { shape: Shape::Sphere { radius: 0.2 }, center: [-0.3, 0.35, 0.1], albedo: RED },
                Primitive { shape: Shape::Sphere { radius: 0.2 }, center: [-0.3, -0.35, 0.1], albedo: RED },
            ],
            WHITE,
        )
        .unwrap();
        let opts = RenderOptions { light_dir: [1.0, 0.0, 1.0], ..RenderOptions::default() };
        let a = 0.7;
        let left = render_view(&scene, &pose_from_spherical(a, 0.3, 2.0).unwrap(), 16, 16, &opts);
        let right = render_view(&scene, &pose_from_spherical(-a, 0.3, 2.0).unwrap(), 16, 16, &opts);
        let mirrored = right.flipped_horizontally();
        for (x, y) in left.data.iter().zip(&mirrored.data) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(left != right);
    }
}
