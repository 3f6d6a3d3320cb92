//! Small vector helpers and the oriented 3D box shared by every stage.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or offset in meters.
pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm_sq(a: Vec3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    norm_sq(a).sqrt()
}

/// Rotates `v` about the z axis by `angle` radians.
#[inline]
pub fn rotate_z(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r == -PI {
        r = PI;
    }
    r
}

/// Oriented 3D box: center, full extents along its local axes, yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3d {
    pub center: Vec3,
    /// (length, width, height) along local (x, y, z).
    pub extents: Vec3,
    pub yaw: f64,
}

impl Box3d {
    /// Builds a box, wrapping yaw into (-π, π]. Extents must be positive and finite.
    pub fn new(center: Vec3, extents: Vec3, yaw: f64) -> Result<Self> {
        if !extents.iter().all(|e| e.is_finite() && *e > 0.0) {
            return Err(Error::Contract(format!("box extents must be positive, got {extents:?}")));
        }
        if !center.iter().all(|c| c.is_finite()) || !yaw.is_finite() {
            return Err(Error::Contract("box center and yaw must be finite".into()));
        }
        Ok(Self { center, extents, yaw: wrap_angle(yaw) })
    }

    pub fn volume(&self) -> f64 {
        self.extents[0] * self.extents[1] * self.extents[2]
    }

    /// World point → box canonical frame (origin at center, axes aligned with the box).
    #[inline]
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        rotate_z(sub(p, self.center), -self.yaw)
    }

    #[inline]
    pub fn to_world(&self, local: Vec3) -> Vec3 {
        add(rotate_z(local, self.yaw), self.center)
    }

    /// Position of `p` in box-normalized coordinates, where the box spans [0, 1) on each axis.
    #[inline]
    pub fn normalized(&self, p: Vec3) -> Vec3 {
        let l = self.to_local(p);
        [
            (l[0] + 0.5 * self.extents[0]) / self.extents[0],
            (l[1] + 0.5 * self.extents[1]) / self.extents[1],
            (l[2] + 0.5 * self.extents[2]) / self.extents[2],
        ]
    }

    /// Half-open containment: every normalized coordinate lies in [0, 1).
    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        self.normalized(p).iter().all(|&s| (0.0..1.0).contains(&s))
    }

    /// Counts the points of `points` inside the box under the half-open rule.
    pub fn count_points(&self, points: &[Vec3]) -> usize {
        let reach_sq = 0.25 * norm_sq(self.extents) * (1.0 + 1e-9);
        points.iter().filter(|p| norm_sq(sub(**p, self.center)) <= reach_sq && self.contains(**p)).count()
    }

    /// Bird's-eye-view corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hx, hy) = (0.5 * self.extents[0], 0.5 * self.extents[1]);
        let (s, c) = self.yaw.sin_cos();
        let cx = self.center[0];
        let cy = self.center[1];
        [(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)].map(|(x, y)| [cx + c * x - s * y, cy + s * x + c * y])
    }

    pub fn z_range(&self) -> (f64, f64) {
        let h = 0.5 * self.extents[2];
        (self.center[2] - h, self.center[2] + h)
    }

    /// Ray–box slab intersection. Returns the parametric interval `(t_enter, t_exit)`
    /// along `origin + t * dir` when the infinite line crosses the box.
    pub fn ray_interval(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let o = self.to_local(origin);
        let d = rotate_z(dir, -self.yaw);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            let half = 0.5 * self.extents[axis];
            if d[axis] == 0.0 {
                if o[axis] < -half || o[axis] > half {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[axis];
            let (mut a, mut b) = ((-half - o[axis]) * inv, (half - o[axis]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}
