//! Pinhole cameras with a world-to-camera pose.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera: intrinsics in pixels, pose mapping world points into the
/// camera frame (`x_cam = rotation * x_world + translation`), +z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera placed at `eye` looking at `target`. `up` is a world-space hint.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: eye coincides with target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: up is parallel to the view direction"))?;
        // Image y grows downwards, so the camera y axis points "down" in the world.
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            focal,
            focal,
            width as f64 / 2.0 - 0.5,
            height as f64 / 2.0 - 0.5,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn from_quaternion(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        qvec: [f64; 4],
        tvec: [f64; 3],
    ) -> Result<Self> {
        let q = nalgebra::Quaternion::new(qvec[0], qvec[1], qvec[2], qvec[3]);
        if !(q.norm() > 1e-12) || !q.norm().is_finite() {
            return Err(Error::invalid("camera quaternion is not normalizable"));
        }
        let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        Camera::new(fx, fy, cx, cy, width, height, rotation, Vector3::from(tvec))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid(format!(
                "camera focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image dimensions must be at least 1x1"));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Same pose with the image scaled by `1/factor`.
    pub fn downscaled(&self, factor: u32) -> Camera {
        let f = factor.max(1) as f64;
        let width = ((self.width as f64) / f).round().max(1.0) as usize;
        let height = ((self.height as f64) / f).round().max(1.0) as usize;
        Camera {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width,
            height,
            rotation: self.rotation,
            translation: self.translation,
        }
    }

    /// Rotation as a unit quaternion `[w, x, y, z]`, COLMAP convention.
    pub fn qvec(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let mut out = [q.w, q.i, q.j, q.k];
        if out[0] < 0.0 {
            out.iter_mut().for_each(|v| *v = -*v);
        }
        out
    }
}
