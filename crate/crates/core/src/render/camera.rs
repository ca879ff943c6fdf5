//! Orbit camera around the volume center and per-pixel ray generation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Vec3;

/// Sampled poses keep |pitch| within this bound.
pub const PITCH_LIMIT: f64 = PI / 14.0;
/// Fixed world-up axis.
pub const WORLD_UP: Vec3 = [0.0, 0.0, 1.0];

/// Orbit pose looking at the volume center with zero roll.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub yaw: f64,
    pub pitch: f64,
    pub distance: f64,
}

impl CameraPose {
    pub fn new(yaw: f64, pitch: f64, distance: f64) -> Self {
        CameraPose { yaw, pitch, distance }
    }

    /// The fixed initialization view: yaw 0, pitch 0, distance `3r`.
    pub fn initial(radius: f64) -> Self {
        CameraPose::new(0.0, 0.0, 3.0 * radius)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.yaw.is_finite() && self.pitch.is_finite() && self.distance.is_finite()) {
            return Err(Error::NonFinite("camera pose".into()));
        }
        if self.distance <= 0.0 {
            return Err(Error::invalid("camera distance must be positive"));
        }
        if self.pitch.abs() >= 0.5 * PI - 1e-6 {
            return Err(Error::invalid("camera pitch must stay away from the poles"));
        }
        Ok(())
    }

    /// Whether the pose lies in the sampling distribution's support for a
    /// volume of bounding radius `radius`.
    pub fn in_orbit_range(&self, radius: f64) -> bool {
        self.pitch.abs() <= PITCH_LIMIT
            && self.distance >= 2.0 * radius
            && self.distance <= 4.0 * radius
    }

    pub fn eye(&self) -> Vec3 {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        [self.distance * cp * cy, self.distance * cp * sy, self.distance * sp]
    }
}

#[inline]
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
fn normalize(a: Vec3) -> Vec3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// A viewing ray clipped to the volume box: samples live in `t_entry..t_exit`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySegment {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_entry: f64,
    pub t_exit: f64,
}

impl RaySegment {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }

    pub fn length(&self) -> f64 {
        self.t_exit - self.t_entry
    }
}

/// Slab test against an axis-aligned box; `None` when the ray misses.
pub fn clip_to_box(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<RaySegment> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut near, mut far) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        t0 = t0.max(near);
        t1 = t1.min(far);
    }
    (t1 > t0).then_some(RaySegment { origin, dir, t_entry: t0, t_exit: t1 })
}

/// Pinhole camera basis for a pose.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    eye: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    tan_half_fov: f64,
    width: usize,
    height: usize,
}

impl Camera {
    pub fn new(pose: &CameraPose, width: usize, height: usize, fov_y_degrees: f64) -> Result<Self> {
        pose.validate()?;
        if width == 0 || height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(fov_y_degrees > 0.0 && fov_y_degrees < 180.0) {
            return Err(Error::invalid("field of view must be in (0, 180) degrees"));
        }
        let eye = pose.eye();
        let forward = normalize(sub([0.0; 3], eye));
        let right = normalize(cross(forward, WORLD_UP));
        let up = cross(right, forward);
        Ok(Camera {
            eye,
            forward,
            right,
            up,
            tan_half_fov: (0.5 * fov_y_degrees.to_radians()).tan(),
            width,
            height,
        })
    }

    pub fn eye(&self) -> Vec3 {
        self.eye
    }

    /// Unit direction through the center of pixel `(x, y)`; row 0 is the top.
    pub fn direction(&self, x: usize, y: usize) -> Vec3 {
        let aspect = self.width as f64 / self.height as f64;
        let u = ((x as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * self.tan_half_fov * aspect;
        let v = (1.0 - (y as f64 + 0.5) / self.height as f64 * 2.0) * self.tan_half_fov;
        normalize(std::array::from_fn(|a| self.forward[a] + u * self.right[a] + v * self.up[a]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_pixel_looks_at_origin() {
        let pose = CameraPose::new(0.7, 0.2, 10.0);
        let cam = Camera::new(&pose, 5, 5, 60.0).unwrap();
        let d = cam.direction(2, 2);
        let eye = pose.eye();
        // eye + t*d passes through the origin when d is anti-parallel to eye
        let dot = -(d[0] * eye[0] + d[1] * eye[1] + d[2] * eye[2]) / 10.0;
        assert!((dot - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slab_entry_exit() {
        let seg = clip_to_box([-5.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0; 3], [1.0; 3]).unwrap();
        assert!((seg.t_entry - 4.0).abs() < 1e-12);
        assert!((seg.t_exit - 6.0).abs() < 1e-12);
        assert!(clip_to_box([-5.0, 3.0, 0.0], [1.0, 0.0, 0.0], [-1.0; 3], [1.0; 3]).is_none());
        assert!(clip_to_box([-5.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [-1.0; 3], [1.0; 3]).is_none());
    }

    #[test]
    fn pose_validation() {
        assert!(CameraPose::new(0.0, 0.0, 0.0).validate().is_err());
        assert!(CameraPose::new(0.0, 1.6, 1.0).validate().is_err());
        assert!(CameraPose::new(f64::NAN, 0.0, 1.0).validate().is_err());
        assert!(CameraPose::initial(2.0).in_orbit_range(2.0));
    }
}
