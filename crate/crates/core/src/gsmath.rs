//! Geometry and covariance math for projecting 3D Gaussians onto an image.
//!
//! Conventions:
//! - pixel centers sit at integer coordinates, the image spans `[-0.5, W-0.5]`;
//! - NDC: `x_ndc = 2 (x_px + 0.5) / W - 1`, likewise for y;
//! - the projected covariance gets [`COV2D_DILATION`] added to its diagonal
//!   before any radius or inverse is computed.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};

/// Isotropic screen-space dilation added to every projected covariance, px².
pub const COV2D_DILATION: f64 = 0.3;
/// Floor applied to the 2D determinant before inversion.
pub const DET_FLOOR: f64 = 1e-12;
/// Near-plane depth below which a Gaussian does not take part in a view.
pub const NEAR_DEPTH: f64 = 0.2;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Symmetric 2x2 screen-space covariance `[[a, b], [b, c]]` in px².
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Cov2D {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Cov2D {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Cov2D { a, b, c }
    }

    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    /// Inverse covariance (the "conic"), with the determinant floored at [`DET_FLOOR`].
    pub fn inverse(&self) -> Cov2D {
        let det = self.det().max(DET_FLOOR);
        Cov2D {
            a: self.c / det,
            b: -self.b / det,
            c: self.a / det,
        }
    }

    /// Largest eigenvalue, discriminant clamped at zero.
    pub fn max_eigenvalue(&self) -> f64 {
        let mid = 0.5 * (self.a + self.c);
        let disc = (mid * mid - self.det()).max(0.0);
        mid + disc.sqrt()
    }

    pub fn to_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.a, self.b, self.b, self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusMode {
    /// `3 * sqrt(lambda_max)`: three standard deviations along the major axis.
    #[default]
    ThreeSigma,
    /// `3 * lambda_max`, taking the eigenvalue itself as the spread.
    ThreeLambda,
}

/// Influence radius of a projected Gaussian in pixels.
pub fn influence_radius(cov: &Cov2D, mode: RadiusMode) -> f64 {
    let lambda = cov.max_eigenvalue();
    match mode {
        RadiusMode::ThreeSigma => 3.0 * lambda.max(0.0).sqrt(),
        RadiusMode::ThreeLambda => 3.0 * lambda,
    }
}

pub fn pixel_to_ndc(px: f64, extent: usize) -> f64 {
    2.0 * (px + 0.5) / extent as f64 - 1.0
}

pub fn ndc_to_pixel(ndc: f64, extent: usize) -> f64 {
    (ndc + 1.0) * extent as f64 / 2.0 - 0.5
}

/// d(pixel)/d(ndc) along an axis of `extent` pixels.
pub fn pixel_per_ndc(extent: usize) -> f64 {
    extent as f64 / 2.0
}

/// Parameters of one Gaussian as seen by the projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// `[w, x, y, z]`, not necessarily unit length; normalized on use.
    pub rotation: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    /// `(x_px, y_px, depth)`.
    pub mu_pixel: Vector3<f64>,
    pub mu_cam: Vector3<f64>,
    pub mu_ndc: Vector3<f64>,
    pub cov2d: Cov2D,
    pub inv_cov2d: Cov2D,
    /// Influence radius in pixels; zero when culled.
    pub radius: f64,
}

impl ProjectedGaussian {
    pub fn culled(&self) -> bool {
        self.radius == 0.0
    }

    /// Rebuilds a projection with a new pixel center, keeping the covariance.
    pub fn with_pixel_center(&self, x: f64, y: f64, cam: &Camera) -> ProjectedGaussian {
        let mut p = *self;
        p.mu_pixel.x = x;
        p.mu_pixel.y = y;
        p.mu_ndc.x = pixel_to_ndc(x, cam.width);
        p.mu_ndc.y = pixel_to_ndc(y, cam.height);
        p
    }
}

/// Normalizes a `[w, x, y, z]` quaternion.
pub fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::invalid(format!("quaternion {q:?} cannot be normalized")));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back onto a unit quaternion.
fn quat_matrix_backward(q: [f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dot = |m: Matrix3<f64>| m.component_mul(d_r).sum();
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    [dot(dw), dot(dx), dot(dy), dot(dz)]
}

/// 3D covariance `R S S^T R^T` and the factor `M = R S`.
pub fn covariance_3d(log_scale: &Vector3<f64>, unit_q: [f64; 4]) -> (Matrix3<f64>, Matrix3<f64>) {
    let s = Matrix3::from_diagonal(&log_scale.map(f64::exp));
    let m = quat_to_matrix(unit_q) * s;
    (m * m.transpose(), m)
}

fn perspective_jacobian(mu_cam: &Vector3<f64>, cam: &Camera) -> Matrix2x3<f64> {
    let (x, y, z) = (mu_cam.x, mu_cam.y, mu_cam.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * x * iz2, 0.0, cam.fy * iz, -cam.fy * y * iz2)
}

/// EWA projection of one Gaussian into `cam`.
pub fn project_gaussian(g: &GaussianParams, cam: &Camera, mode: RadiusMode) -> Result<ProjectedGaussian> {
    let q = normalize_quat(g.rotation)?;
    let mu_cam = cam.world_to_camera(&g.position);
    let z = mu_cam.z;
    if !(z > 0.0) || !z.is_finite() {
        return Ok(ProjectedGaussian {
            mu_pixel: Vector3::new(f64::NAN, f64::NAN, z),
            mu_cam,
            mu_ndc: Vector3::new(f64::NAN, f64::NAN, f64::NAN),
            cov2d: Cov2D::default(),
            inv_cov2d: Cov2D::default(),
            radius: 0.0,
        });
    }
    let px = cam.fx * mu_cam.x / z + cam.cx;
    let py = cam.fy * mu_cam.y / z + cam.cy;

    let (sigma3, _) = covariance_3d(&g.log_scale, q);
    let w = cam.rotation * sigma3 * cam.rotation.transpose();
    let j = perspective_jacobian(&mu_cam, cam);
    let s2 = j * w * j.transpose();
    let cov2d = Cov2D::new(s2[(0, 0)] + COV2D_DILATION, s2[(0, 1)], s2[(1, 1)] + COV2D_DILATION);
    let radius = if cov2d.det() > 0.0 { influence_radius(&cov2d, mode) } else { 0.0 };
    Ok(ProjectedGaussian {
        mu_pixel: Vector3::new(px, py, z),
        mu_cam,
        mu_ndc: Vector3::new(pixel_to_ndc(px, cam.width), pixel_to_ndc(py, cam.height), ndc_depth(z)),
        cov2d,
        inv_cov2d: cov2d.inverse(),
        radius,
    })
}

/// NDC depth for an OpenGL-style frustum with near 0.01 and far 100. Stored
/// for completeness; nothing downstream differentiates through it.
fn ndc_depth(z: f64) -> f64 {
    const ZN: f64 = 0.01;
    const ZF: f64 = 100.0;
    (ZF + ZN) / (ZF - ZN) - 2.0 * ZF * ZN / ((ZF - ZN) * z)
}

/// Whether a projected Gaussian takes part in rendering `cam` (six strict conditions).
pub fn view_participates(p: &ProjectedGaussian, cam: &Camera) -> bool {
    let r = p.radius;
    let w = cam.width as f64;
    let h = cam.height as f64;
    r > 0.0
        && p.mu_cam.z > NEAR_DEPTH
        && -r - 0.5 < p.mu_pixel.x
        && p.mu_pixel.x < r + w - 0.5
        && -r - 0.5 < p.mu_pixel.y
        && p.mu_pixel.y < r + h - 0.5
}

/// Upstream gradients arriving at a projected Gaussian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProjectedGrad {
    /// dL / d(mu_pixel.x, mu_pixel.y).
    pub mean_px: Vector2<f64>,
    /// dL / d(a, b, c) of the dilated 2D covariance; `b` is the single off-diagonal value.
    pub cov2d: Cov2D,
}

/// Gradients of the loss w.r.t. one Gaussian's geometric parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeometryGrad {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
}

/// Gradient of `f(inverse(cov))` w.r.t. `cov`, given `d_conic = df/d(A, B, C)`.
pub fn inverse_backward(cov: &Cov2D, d_conic: &Cov2D) -> Cov2D {
    let raw_det = cov.det();
    let (a, b, c) = (cov.a, cov.b, cov.c);
    if raw_det < DET_FLOOR {
        // Determinant is clamped: only the adjugate numerators vary.
        let d = DET_FLOOR;
        return Cov2D::new(d_conic.c / d, -d_conic.b / d, d_conic.a / d);
    }
    let d = raw_det;
    let d2 = d * d;
    let (ga, gb, gc) = (d_conic.a, d_conic.b, d_conic.c);
    Cov2D {
        a: ga * (-c * c / d2) + gb * (b * c / d2) + gc * (1.0 / d - a * c / d2),
        b: ga * (2.0 * b * c / d2) + gb * (-1.0 / d - 2.0 * b * b / d2) + gc * (2.0 * a * b / d2),
        c: ga * (1.0 / d - a * c / d2) + gb * (a * b / d2) + gc * (-a * a / d2),
    }
}

/// Backward pass of [`project_gaussian`] (pixel center and covariance paths).
pub fn project_backward(g: &GaussianParams, cam: &Camera, upstream: &ProjectedGrad) -> Result<GeometryGrad> {
    let raw = g.rotation;
    let qn = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3]).sqrt();
    let q = normalize_quat(raw)?;
    let mu_cam = cam.world_to_camera(&g.position);
    let (x, y, z) = (mu_cam.x, mu_cam.y, mu_cam.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    // Pixel center path.
    let dmx = upstream.mean_px.x;
    let dmy = upstream.mean_px.y;
    let mut d_cam = Vector3::new(
        dmx * cam.fx * iz,
        dmy * cam.fy * iz,
        -dmx * cam.fx * x * iz2 - dmy * cam.fy * y * iz2,
    );

    // Covariance path.
    let (sigma3, m) = covariance_3d(&g.log_scale, q);
    let view = cam.rotation;
    let w = view * sigma3 * view.transpose();
    let j = perspective_jacobian(&mu_cam, cam);
    let gc = upstream.cov2d;
    let g2 = Matrix2::new(gc.a, 0.5 * gc.b, 0.5 * gc.b, gc.c);

    let d_j = 2.0 * g2 * j * w;
    d_cam.x += d_j[(0, 2)] * (-cam.fx * iz2);
    d_cam.y += d_j[(1, 2)] * (-cam.fy * iz2);
    d_cam.z += d_j[(0, 0)] * (-cam.fx * iz2)
        + d_j[(0, 2)] * (2.0 * cam.fx * x * iz3)
        + d_j[(1, 1)] * (-cam.fy * iz2)
        + d_j[(1, 2)] * (2.0 * cam.fy * y * iz3);

    let d_w = j.transpose() * g2 * j;
    let d_sigma3 = view.transpose() * d_w * view;
    let d_m = 2.0 * d_sigma3 * m;
    let r = quat_to_matrix(q);
    let scale = g.log_scale.map(f64::exp);
    let mut d_log_scale = Vector3::zeros();
    for k in 0..3 {
        let ds: f64 = (0..3).map(|row| d_m[(row, k)] * r[(row, k)]).sum();
        d_log_scale[k] = ds * scale[k];
    }
    let d_r = d_m * Matrix3::from_diagonal(&scale);
    let d_qhat = quat_matrix_backward(q, &d_r);
    let proj: f64 = (0..4).map(|i| q[i] * d_qhat[i]).sum();
    let d_rotation = [
        (d_qhat[0] - q[0] * proj) / qn,
        (d_qhat[1] - q[1] * proj) / qn,
        (d_qhat[2] - q[2] * proj) / qn,
        (d_qhat[3] - q[3] * proj) / qn,
    ];

    Ok(GeometryGrad {
        position: view.transpose() * d_cam,
        log_scale: d_log_scale,
        rotation: d_rotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn identity_cam(f: f64, w: usize, h: usize) -> Camera {
        Camera::new(f, f, w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, w, h, Matrix3::identity(), Vector3::zeros())
            .unwrap()
    }

    #[test]
    fn isotropic_on_axis_covariance() {
        let (f, s, z) = (50.0, 0.1, 2.0);
        let cam = identity_cam(f, 64, 64);
        let g = GaussianParams {
            position: Vector3::new(0.0, 0.0, z),
            log_scale: Vector3::repeat(f64::ln(s)),
            rotation: [1.0, 0.0, 0.0, 0.0],
        };
        let p = project_gaussian(&g, &cam, RadiusMode::ThreeSigma).unwrap();
        let expected = (f * s / z).powi(2) + 0.3;
        assert_relative_eq!(p.cov2d.a, expected, epsilon = 1e-12);
        assert_relative_eq!(p.cov2d.c, expected, epsilon = 1e-12);
        assert_relative_eq!(p.cov2d.b, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn image_center_maps_to_ndc_origin() {
        let cam = identity_cam(1.0, 100, 100);
        let g = GaussianParams {
            position: Vector3::new(0.0, 0.0, 2.0),
            log_scale: Vector3::repeat(-3.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
        };
        let p = project_gaussian(&g, &cam, RadiusMode::ThreeSigma).unwrap();
        assert_relative_eq!(p.mu_cam.z, 2.0);
        assert_relative_eq!(p.mu_pixel.x, 49.5);
        assert_relative_eq!(p.mu_pixel.y, 49.5);
        assert_relative_eq!(p.mu_ndc.x, 0.0);
        assert_relative_eq!(p.mu_ndc.y, 0.0);
    }

    #[test]
    fn degenerate_rotation_is_rejected() {
        let cam = identity_cam(1.0, 8, 8);
        let g = GaussianParams {
            position: Vector3::new(0.0, 0.0, 2.0),
            log_scale: Vector3::zeros(),
            rotation: [0.0; 4],
        };
        assert!(matches!(project_gaussian(&g, &cam, RadiusMode::ThreeSigma), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn radius_examples() {
        let id = Cov2D::new(1.0, 0.0, 1.0);
        assert_relative_eq!(influence_radius(&id, RadiusMode::ThreeSigma), 3.0);
        assert_relative_eq!(influence_radius(&id, RadiusMode::ThreeLambda), 3.0);
        let d = Cov2D::new(4.0, 0.0, 1.0);
        assert_relative_eq!(influence_radius(&d, RadiusMode::ThreeSigma), 6.0);
        assert_relative_eq!(influence_radius(&d, RadiusMode::ThreeLambda), 12.0);
        let o = Cov2D::new(2.0, 1.0, 2.0);
        assert_relative_eq!(influence_radius(&o, RadiusMode::ThreeSigma), 3.0 * 3f64.sqrt(), epsilon = 1e-12);
    }

    fn projected_at(x: f64, y: f64, depth: f64, radius: f64) -> ProjectedGaussian {
        ProjectedGaussian {
            mu_pixel: Vector3::new(x, y, depth),
            mu_cam: Vector3::new(0.0, 0.0, depth),
            mu_ndc: Vector3::zeros(),
            cov2d: Cov2D::new(1.0, 0.0, 1.0),
            inv_cov2d: Cov2D::new(1.0, 0.0, 1.0),
            radius,
        }
    }

    #[test]
    fn view_participation_boundaries() {
        let cam = identity_cam(1.0, 100, 100);
        assert!(view_participates(&projected_at(50.0, 50.0, 1.0, 5.0), &cam));
        assert!(!view_participates(&projected_at(50.0, 50.0, 0.2, 5.0), &cam));
        assert!(!view_participates(&projected_at(5.0 + 100.0 - 0.5, 50.0, 1.0, 5.0), &cam));
        assert!(!view_participates(&projected_at(-5.0 - 0.5, 50.0, 1.0, 5.0), &cam));
        assert!(!view_participates(&projected_at(50.0, 50.0, 1.0, 0.0), &cam));
    }

    #[test]
    fn inverse_backward_matches_finite_differences() {
        let cov = Cov2D::new(3.0, 0.7, 2.0);
        let weights = Cov2D::new(0.3, -1.1, 0.8);
        let f = |c: Cov2D| {
            let q = c.inverse();
            weights.a * q.a + weights.b * q.b + weights.c * q.c
        };
        let g = inverse_backward(&cov, &weights);
        let h = 1e-6;
        let fd_a = (f(Cov2D { a: cov.a + h, ..cov }) - f(Cov2D { a: cov.a - h, ..cov })) / (2.0 * h);
        let fd_b = (f(Cov2D { b: cov.b + h, ..cov }) - f(Cov2D { b: cov.b - h, ..cov })) / (2.0 * h);
        let fd_c = (f(Cov2D { c: cov.c + h, ..cov }) - f(Cov2D { c: cov.c - h, ..cov })) / (2.0 * h);
        assert_relative_eq!(g.a, fd_a, max_relative = 1e-7);
        assert_relative_eq!(g.b, fd_b, max_relative = 1e-7);
        assert_relative_eq!(g.c, fd_c, max_relative = 1e-7);
    }

    #[test]
    fn project_backward_matches_finite_differences() {
        let cam = Camera::look_at(
            Vector3::new(0.3, -2.5, 1.0),
            Vector3::new(0.0, 0.0, 0.2),
            Vector3::z(),
            40.0,
            48,
            40,
        )
        .unwrap();
        let g = GaussianParams {
            position: Vector3::new(0.2, 0.1, 0.3),
            log_scale: Vector3::new(-1.5, -2.0, -1.2),
            rotation: [0.9, 0.2, -0.3, 0.25],
        };
        let up = ProjectedGrad {
            mean_px: Vector2::new(0.4, -0.7),
            cov2d: Cov2D::new(0.05, -0.02, 0.03),
        };
        let objective = |g: &GaussianParams| {
            let p = project_gaussian(g, &cam, RadiusMode::ThreeSigma).unwrap();
            up.mean_px.x * p.mu_pixel.x + up.mean_px.y * p.mu_pixel.y
                + up.cov2d.a * p.cov2d.a
                + up.cov2d.b * p.cov2d.b
                + up.cov2d.c * p.cov2d.c
        };
        let grad = project_backward(&g, &cam, &up).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut gp = g;
            let mut gm = g;
            gp.position[k] += h;
            gm.position[k] -= h;
            let fd = (objective(&gp) - objective(&gm)) / (2.0 * h);
            assert_relative_eq!(grad.position[k], fd, max_relative = 1e-6, epsilon = 1e-9);
            let mut gp = g;
            let mut gm = g;
            gp.log_scale[k] += h;
            gm.log_scale[k] -= h;
            let fd = (objective(&gp) - objective(&gm)) / (2.0 * h);
            assert_relative_eq!(grad.log_scale[k], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
        for k in 0..4 {
            let mut gp = g;
            let mut gm = g;
            gp.rotation[k] += h;
            gm.rotation[k] -= h;
            let fd = (objective(&gp) - objective(&gm)) / (2.0 * h);
            assert_relative_eq!(grad.rotation[k], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn radius_matches_symmetric_eigen(a in 0.01f64..50.0, c in 0.01f64..50.0, t in -0.99f64..0.99) {
            let b = t * (a * c).sqrt();
            let cov = Cov2D::new(a, b, c);
            let eig = nalgebra::SymmetricEigen::new(cov.to_matrix());
            let lmax = eig.eigenvalues.max();
            let r = influence_radius(&cov, RadiusMode::ThreeSigma);
            prop_assert!(((r - 3.0 * lmax.sqrt()) / r).abs() < 1e-9);
        }

        #[test]
        fn radius_is_rotation_invariant(a in 0.01f64..50.0, c in 0.01f64..50.0, t in -0.99f64..0.99, theta in 0.0f64..6.3) {
            let b = t * (a * c).sqrt();
            let cov = Cov2D::new(a, b, c);
            let rot = nalgebra::Rotation2::new(theta).into_inner();
            let m = rot * cov.to_matrix() * rot.transpose();
            let rotated = Cov2D::new(m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
            let r0 = influence_radius(&cov, RadiusMode::ThreeSigma);
            let r1 = influence_radius(&rotated, RadiusMode::ThreeSigma);
            prop_assert!(((r0 - r1) / r0).abs() < 1e-9);
        }

        #[test]
        fn participation_monotone_in_radius(x in -30.0f64..130.0, y in -30.0f64..130.0, r in 0.0f64..20.0, extra in 0.0f64..20.0) {
            let cam = identity_cam(1.0, 100, 100);
            if view_participates(&projected_at(x, y, 1.0, r), &cam) {
                prop_assert!(view_participates(&projected_at(x, y, 1.0, r + extra + 1e-9), &cam));
            }
        }

        #[test]
        fn ndc_round_trip(px in -10.0f64..300.0, w in 1usize..512) {
            let back = ndc_to_pixel(pixel_to_ndc(px, w), w);
            prop_assert!((back - px).abs() < 1e-9);
        }
    }
}
