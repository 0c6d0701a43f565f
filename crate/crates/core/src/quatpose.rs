//! Camera orientation as unit quaternions: canonical form, geodesic
//! interpolation, multi-frequency sine encoding and hemisphere pose layouts.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default number of sine frequency bands per quaternion component.
pub const DEFAULT_NUM_FREQUENCIES: usize = 7;

/// Vertical field of view of the shared pinhole camera, in degrees.
pub const VERTICAL_FOV_DEG: f64 = 50.0;

/// SLERP falls back to normalized linear blending below this angle.
const SLERP_DEGENERATE_ANGLE: f64 = 1e-6;

/// Unit quaternion `w + xi + yj + zk` kept on the `w >= 0` hemisphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion<S> {
    pub w: S,
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Scalar> Quaternion<S> {
    pub fn identity() -> Self {
        Self { w: S::one(), x: S::zero(), y: S::zero(), z: S::zero() }
    }

    /// Normalizes a raw 4-vector `(w, x, y, z)` and resolves the double cover.
    pub fn canonicalize(raw: [S; 4]) -> Result<Self> {
        let norm = raw.iter().fold(S::zero(), |acc, &c| acc + c * c).sqrt();
        if !(norm > S::zero()) || !norm.is_finite() {
            return Err(Error::DegenerateQuaternion);
        }
        // Inputs already unit to within a few ulps are kept bit-for-bit.
        let unit_tol = S::epsilon() * S::from_f64_lossy(4.0);
        let mut q = if (norm - S::one()).abs() <= unit_tol { raw } else { raw.map(|c| c / norm) };
        // The first nonzero component (scanning w, x, y, z) decides the sign.
        let flip = q.iter().find(|c| **c != S::zero()).is_some_and(|c| *c < S::zero());
        if flip {
            q = q.map(|c| -c);
        }
        Ok(Self { w: q[0], x: q[1], y: q[2], z: q[3] })
    }

    pub fn to_array(self) -> [S; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> S {
        self.dot(self).sqrt()
    }

    pub fn dot(self, other: Self) -> S {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Angle `arccos(q1 . q2)` between two canonical quaternions, in `[0, pi]`.
    pub fn angle(self, other: Self) -> S {
        let d = self.dot(other).max(-S::one()).min(S::one());
        d.acos()
    }

    /// Spherical linear interpolation at parameter `t`, re-canonicalized.
    pub fn slerp(self, other: Self, t: S) -> Self {
        let omega = self.angle(other);
        let blended = if omega < S::from_f64_lossy(SLERP_DEGENERATE_ANGLE) {
            let s = S::one() - t;
            [
                s * self.w + t * other.w,
                s * self.x + t * other.x,
                s * self.y + t * other.y,
                s * self.z + t * other.z,
            ]
        } else {
            let sin_omega = omega.sin();
            let a = ((S::one() - t) * omega).sin() / sin_omega;
            let b = (t * omega).sin() / sin_omega;
            [
                a * self.w + b * other.w,
                a * self.x + b * other.x,
                a * self.y + b * other.y,
                a * self.z + b * other.z,
            ]
        };
        // Both endpoints are unit and the weights are nonnegative for t in [0, 1],
        // so the blend cannot vanish.
        Self::canonicalize(blended).unwrap_or(self)
    }

    /// Hamilton product `self * other`.
    pub fn mul(self, o: Self) -> Self {
        Self {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    /// Rotates a 3-vector by this (unit) quaternion.
    pub fn rotate(self, v: [S; 3]) -> [S; 3] {
        let two = S::from_f64_lossy(2.0);
        let u = [self.x, self.y, self.z];
        let uv = cross(u, v);
        let t = [two * uv[0], two * uv[1], two * uv[2]];
        let ut = cross(u, t);
        [
            v[0] + self.w * t[0] + ut[0],
            v[1] + self.w * t[1] + ut[1],
            v[2] + self.w * t[2] + ut[2],
        ]
    }

    /// Rotation whose matrix has the given orthonormal columns.
    pub fn from_rotation_columns(c0: [S; 3], c1: [S; 3], c2: [S; 3]) -> Result<Self> {
        let (m00, m10, m20) = (c0[0], c0[1], c0[2]);
        let (m01, m11, m21) = (c1[0], c1[1], c1[2]);
        let (m02, m12, m22) = (c2[0], c2[1], c2[2]);
        let one = S::one();
        let quarter = S::from_f64_lossy(0.25);
        let trace = m00 + m11 + m22;
        let raw = if trace > S::zero() {
            let s = (trace + one).sqrt() * S::from_f64_lossy(2.0);
            [quarter * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s]
        } else if m00 > m11 && m00 > m22 {
            let s = (one + m00 - m11 - m22).sqrt() * S::from_f64_lossy(2.0);
            [(m21 - m12) / s, quarter * s, (m01 + m10) / s, (m02 + m20) / s]
        } else if m11 > m22 {
            let s = (one + m11 - m00 - m22).sqrt() * S::from_f64_lossy(2.0);
            [(m02 - m20) / s, (m01 + m10) / s, quarter * s, (m12 + m21) / s]
        } else {
            let s = (one + m22 - m00 - m11).sqrt() * S::from_f64_lossy(2.0);
            [(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, quarter * s]
        };
        Self::canonicalize(raw)
    }

    pub fn cast<T: Scalar>(self) -> Quaternion<T> {
        Quaternion {
            w: T::from_f64_lossy(self.w.to_f64_lossy()),
            x: T::from_f64_lossy(self.x.to_f64_lossy()),
            y: T::from_f64_lossy(self.y.to_f64_lossy()),
            z: T::from_f64_lossy(self.z.to_f64_lossy()),
        }
    }
}

/// Angle between two canonical quaternions.
pub fn quat_angle<S: Scalar>(q1: Quaternion<S>, q2: Quaternion<S>) -> S {
    q1.angle(q2)
}

pub fn slerp<S: Scalar>(q1: Quaternion<S>, q2: Quaternion<S>, t: S) -> Quaternion<S> {
    q1.slerp(q2, t)
}

pub fn canonicalize<S: Scalar>(raw: [S; 4]) -> Result<Quaternion<S>> {
    Quaternion::canonicalize(raw)
}

/// Sine features of a camera orientation, component-major:
/// `[sin(w*1) .. sin(w*F), sin(x*1) .. sin(x*F), ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEmbedding<S> {
    pub values: Vec<S>,
}

impl<S: Scalar> PoseEmbedding<S> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros(len: usize) -> Self {
        Self { values: vec![S::zero(); len] }
    }
}

pub fn sine_encode<S: Scalar>(q: Quaternion<S>, num_frequencies: usize) -> Result<PoseEmbedding<S>> {
    if num_frequencies == 0 {
        return Err(Error::InvalidConfig("num_frequencies must be positive".into()));
    }
    let mut values = Vec::with_capacity(4 * num_frequencies);
    for c in q.to_array() {
        for i in 1..=num_frequencies {
            values.push((c * S::from_usize_lossy(i)).sin());
        }
    }
    Ok(PoseEmbedding { values })
}

/// Pinhole camera looking at `look_at`; `orientation` maps camera axes
/// (x right, y up, looking down -z) to world axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose<S> {
    pub orientation: Quaternion<S>,
    pub position: [S; 3],
    pub look_at: [S; 3],
    pub up: [S; 3],
}

impl<S: Scalar> CameraPose<S> {
    /// Builds the look-at frame for a camera at `position`.
    pub fn look_at(position: [S; 3], target: [S; 3], up: [S; 3]) -> Result<Self> {
        let radius = norm3(position).to_f64_lossy();
        if !(radius > 1.0) {
            return Err(Error::CameraInsideScene { radius });
        }
        let forward = normalize3(sub3(target, position));
        let right = normalize3(cross(forward, up));
        if !right.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidConfig("camera up vector is parallel to the view direction".into()));
        }
        let cam_up = cross(right, forward);
        let back = forward.map(|c| -c);
        let orientation = Quaternion::from_rotation_columns(right, cam_up, back)?;
        Ok(Self { orientation, position, look_at: target, up })
    }

    /// Camera at `position` looking at the origin with world `+z` up.
    pub fn from_position(position: [S; 3]) -> Result<Self> {
        Self::look_at(position, [S::zero(); 3], [S::zero(), S::zero(), S::one()])
    }

    pub fn forward(&self) -> [S; 3] {
        self.orientation.rotate([S::zero(), S::zero(), -S::one()])
    }

    /// World-space unit direction through the center of pixel `(row, col)`.
    pub fn ray_direction(&self, row: usize, col: usize, height: usize, width: usize) -> [S; 3] {
        let tan_half = S::from_f64_lossy((VERTICAL_FOV_DEG.to_radians() * 0.5).tan());
        let aspect = S::from_usize_lossy(width) / S::from_usize_lossy(height);
        let half = S::from_f64_lossy(0.5);
        let two = S::from_f64_lossy(2.0);
        let u = (two * (S::from_usize_lossy(col) + half) / S::from_usize_lossy(width) - S::one()) * tan_half * aspect;
        let v = (S::one() - two * (S::from_usize_lossy(row) + half) / S::from_usize_lossy(height)) * tan_half;
        normalize3(self.orientation.rotate([u, v, -S::one()]))
    }

    pub fn azimuth(&self) -> S {
        let a = self.position[1].atan2(self.position[0]);
        if a < S::zero() {
            a + S::TAU()
        } else {
            a
        }
    }

    pub fn elevation(&self) -> S {
        (self.position[2] / norm3(self.position)).asin()
    }

    pub fn cast<T: Scalar>(&self) -> CameraPose<T> {
        let c3 = |v: [S; 3]| v.map(|c| T::from_f64_lossy(c.to_f64_lossy()));
        CameraPose {
            orientation: self.orientation.cast(),
            position: c3(self.position),
            look_at: c3(self.look_at),
            up: c3(self.up),
        }
    }

    /// `{"quat":[w,x,y,z],"position":[x,y,z]}` with 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\"quat\":[");
        push_floats(&mut s, &self.orientation.to_array());
        s.push_str("],\"position\":[");
        push_floats(&mut s, &self.position);
        s.push_str("]}");
        s
    }

    /// Restores a pose written by [`CameraPose::to_json`]. The camera is
    /// assumed to look at the origin with `+z` up.
    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        let read = |key: &str, n: usize| -> Result<Vec<S>> {
            let arr = v
                .get(key)
                .and_then(|a| a.as_array())
                .filter(|a| a.len() == n)
                .ok_or_else(|| Error::InvalidInput(format!("pose field `{key}` must be an array of {n} numbers")))?;
            arr.iter()
                .map(|x| {
                    x.as_f64()
                        .map(S::from_f64_lossy)
                        .ok_or_else(|| Error::InvalidInput(format!("pose field `{key}` is not numeric")))
                })
                .collect()
        };
        let q = read("quat", 4)?;
        let p = read("position", 3)?;
        let orientation = Quaternion::canonicalize([q[0], q[1], q[2], q[3]])?;
        Ok(Self {
            orientation,
            position: [p[0], p[1], p[2]],
            look_at: [S::zero(); 3],
            up: [S::zero(), S::zero(), S::one()],
        })
    }
}

fn push_floats<S: Scalar>(s: &mut String, vals: &[S]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{:.16e}", v.to_f64_lossy()).expect("writing to a String");
    }
}

/// Serializes a pose list as a JSON array, one pose per line.
pub fn poses_to_json<S: Scalar>(poses: &[CameraPose<S>]) -> String {
    let mut s = String::from("[\n");
    for (i, p) in poses.iter().enumerate() {
        s.push_str(&p.to_json());
        if i + 1 < poses.len() {
            s.push(',');
        }
        s.push('\n');
    }
    s.push(']');
    s
}

pub fn poses_from_json<S: Scalar>(text: &str) -> Result<Vec<CameraPose<S>>> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("pose list: {e}")))?;
    v.as_array()
        .ok_or_else(|| Error::InvalidInput("pose list must be a JSON array".into()))?
        .iter()
        .map(CameraPose::from_json_value)
        .collect()
}

/// Camera on a sphere of `radius` around the origin, looking at it, `+z` up.
pub fn pose_from_spherical<S: Scalar>(azimuth: S, elevation: S, radius: S) -> Result<CameraPose<S>> {
    if !(radius > S::one()) {
        return Err(Error::CameraInsideScene { radius: radius.to_f64_lossy() });
    }
    if !(elevation.abs() < S::FRAC_PI_2()) {
        return Err(Error::InvalidConfig("elevation must lie strictly inside (-pi/2, pi/2)".into()));
    }
    let (ce, se) = (elevation.cos(), elevation.sin());
    let position = [radius * ce * azimuth.cos(), radius * ce * azimuth.sin(), radius * se];
    CameraPose::from_position(position)
}

/// `k` poses at azimuths `2 pi j / k` sharing one elevation and radius.
pub fn uniform_hemisphere_poses<S: Scalar>(k: usize, elevation: S, radius: S) -> Result<Vec<CameraPose<S>>> {
    if k == 0 {
        return Err(Error::InvalidConfig("pose count must be positive".into()));
    }
    if elevation < S::zero() {
        return Err(Error::InvalidConfig("hemisphere elevation must be nonnegative".into()));
    }
    (0..k)
        .map(|j| pose_from_spherical(S::TAU() * S::from_usize_lossy(j) / S::from_usize_lossy(k), elevation, radius))
        .collect()
}

pub(crate) fn cross<S: Scalar>(a: [S; 3], b: [S; 3]) -> [S; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn sub3<S: Scalar>(a: [S; 3], b: [S; 3]) -> [S; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3<S: Scalar>(a: [S; 3], b: [S; 3]) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3<S: Scalar>(a: [S; 3]) -> S {
    dot3(a, a).sqrt()
}

pub(crate) fn normalize3<S: Scalar>(a: [S; 3]) -> [S; 3] {
    let n = norm3(a);
    a.map(|c| c / n)
}
