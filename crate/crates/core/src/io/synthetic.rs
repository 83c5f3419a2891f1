//! Procedural posed scenes with known ground truth.
//!
//! The ground truth is a set of flat, opaque Gaussians tiling a textured
//! floor, two spheres and a box. Targets are rendered from it with the
//! project's own renderer. Initialization points are sampled independently
//! from the same surfaces, with an optional spherical region where only a
//! fraction of them is kept.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gsmath::logit;
use crate::renderer::{render_forward, RenderConfig};
use crate::scene::{GaussianCloud, PointSet};
use crate::sh;
use crate::trainer::View;

/// Spherical region where initialization points are withheld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub center: [f64; 3],
    pub radius: f64,
    /// Fraction of the region's points that is kept; 1 keeps everything.
    pub keep_fraction: f64,
}

impl MaskSpec {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - Vector3::from(self.center)).norm() < self.radius
    }

    /// Number of Gaussians centered inside the region.
    pub fn count_inside(&self, cloud: &GaussianCloud) -> usize {
        cloud.positions.iter().filter(|p| self.contains(p)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub orbit_radius: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub gt_gaussians: usize,
    pub init_points: usize,
    /// Standard deviation of the position noise on initialization points.
    pub init_jitter: f64,
    /// Standard deviation of the color noise on initialization points.
    pub color_jitter: f64,
    pub background: [f64; 3],
    pub mask: Option<MaskSpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            cameras: 24,
            width: 128,
            height: 128,
            focal_factor: 1.0,
            orbit_radius: 3.5,
            elevation_min_deg: 15.0,
            elevation_max_deg: 45.0,
            gt_gaussians: 30_000,
            init_points: 6_000,
            init_jitter: 0.01,
            color_jitter: 0.03,
            background: [0.0; 3],
            mask: Some(MaskSpec {
                center: [-0.9, -0.35, 0.5],
                radius: 0.45,
                keep_fraction: 0.01,
            }),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("synthetic scene needs cameras and a non-empty resolution".into()));
        }
        if self.init_points < 4 {
            return Err(Error::Config("synthetic scene needs at least 4 init points".into()));
        }
        if !(self.focal_factor > 0.0) || !(self.orbit_radius > 0.0) {
            return Err(Error::Config("focal_factor and orbit_radius must be positive".into()));
        }
        if let Some(m) = &self.mask {
            if !(0.0..=1.0).contains(&m.keep_fraction) || !(m.radius > 0.0) {
                return Err(Error::Config("mask needs keep_fraction in [0, 1] and a positive radius".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub ground_truth: GaussianCloud,
    pub views: Vec<View>,
    pub points: PointSet,
}

impl SyntheticScene {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            background: self.spec.background,
            ..Default::default()
        }
    }
}

/// A surface sample: position, unit normal, tangent, and texture color.
struct Sample {
    p: Vector3<f64>,
    n: Vector3<f64>,
    t: Vector3<f64>,
    color: Vector3<f64>,
}

enum Surface {
    Floor { y: f64, half: f64 },
    Sphere { c: Vector3<f64>, r: f64, palette: [Vector3<f64>; 2], bands: f64 },
    Box { c: Vector3<f64>, h: f64 },
}

fn rgb(r: f64, g: f64, b: f64) -> Vector3<f64> {
    Vector3::new(r, g, b)
}

fn surfaces() -> Vec<Surface> {
    vec![
        Surface::Floor { y: -0.6, half: 1.5 },
        Surface::Sphere {
            c: Vector3::new(0.0, 0.0, 0.0),
            r: 0.6,
            palette: [rgb(0.85, 0.3, 0.2), rgb(0.95, 0.85, 0.4)],
            bands: 10.0,
        },
        Surface::Sphere {
            c: Vector3::new(-0.9, -0.35, 0.5),
            r: 0.25,
            palette: [rgb(0.2, 0.7, 0.35), rgb(0.9, 0.9, 0.95)],
            bands: 6.0,
        },
        Surface::Box {
            c: Vector3::new(0.9, -0.3, -0.6),
            h: 0.3,
        },
    ]
}

impl Surface {
    fn area(&self) -> f64 {
        match self {
            Surface::Floor { half, .. } => 4.0 * half * half,
            Surface::Sphere { r, .. } => 4.0 * PI * r * r,
            Surface::Box { h, .. } => 6.0 * 4.0 * h * h,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        match *self {
            Surface::Floor { y, half } => {
                let (x, z) = (rng.random_range(-half..half), rng.random_range(-half..half));
                let checker = ((x / 0.25).floor() + (z / 0.25).floor()) as i64 % 2 == 0;
                let color = if checker { rgb(0.15, 0.2, 0.55) } else { rgb(0.8, 0.8, 0.75) };
                Sample {
                    p: Vector3::new(x, y, z),
                    n: Vector3::y(),
                    t: Vector3::x(),
                    color,
                }
            }
            Surface::Sphere { c, r, palette, bands } => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let s = (1.0 - z * z).sqrt();
                let n = Vector3::new(s * phi.cos(), z, s * phi.sin());
                let band = ((phi / (2.0 * PI) * bands).floor() as i64 + ((z + 1.0) * 3.0).floor() as i64) % 2;
                let t = n.cross(&Vector3::y()).try_normalize(1e-9).unwrap_or(Vector3::x());
                Sample {
                    p: c + r * n,
                    n,
                    t,
                    color: palette[band as usize],
                }
            }
            Surface::Box { c, h } => {
                let face = rng.random_range(0..6usize);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let (u, v) = (rng.random_range(-h..h), rng.random_range(-h..h));
                let mut n = Vector3::zeros();
                n[axis] = sign;
                let ta = (axis + 1) % 3;
                let tb = (axis + 2) % 3;
                let mut off = n * h;
                off[ta] = u;
                off[tb] = v;
                let mut t = Vector3::zeros();
                t[ta] = 1.0;
                let stripe = ((u + h) / (h / 3.0)).floor() as i64 % 2 == 0;
                let base = [rgb(0.9, 0.5, 0.1), rgb(0.3, 0.3, 0.85), rgb(0.6, 0.2, 0.6)][axis];
                Sample {
                    p: c + off,
                    n,
                    t,
                    color: if stripe { base } else { base * 0.45 },
                }
            }
        }
    }
}

fn sample_surfaces(rng: &mut ChaCha8Rng, count: usize) -> Vec<Sample> {
    let surfs = surfaces();
    let total: f64 = surfs.iter().map(Surface::area).sum();
    let mut out = Vec::with_capacity(count);
    let mut done = 0;
    for (k, s) in surfs.iter().enumerate() {
        let n = if k + 1 == surfs.len() {
            count - done
        } else {
            ((count as f64) * s.area() / total).round() as usize
        };
        done += n;
        out.extend((0..n).map(|_| s.sample(rng)));
    }
    out
}

fn ground_truth(rng: &mut ChaCha8Rng, count: usize) -> GaussianCloud {
    let total: f64 = surfaces().iter().map(Surface::area).sum();
    let tangent_scale = 0.8 * (total / count.max(1) as f64).sqrt();
    let mut cloud = GaussianCloud::empty(0);
    for s in sample_surfaces(rng, count) {
        let b = s.n.cross(&s.t);
        let frame = Matrix3::from_columns(&[s.t, b, s.n]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(frame));
        let log_scale = Vector3::new(tangent_scale.ln(), tangent_scale.ln(), (0.1 * tangent_scale).ln());
        let coeffs = [sh::rgb_to_dc(s.color.x), sh::rgb_to_dc(s.color.y), sh::rgb_to_dc(s.color.z)];
        cloud.push(s.p, log_scale, [q.w, q.i, q.j, q.k], logit(0.95), &coeffs);
    }
    cloud
}

fn orbit_cameras(spec: &SyntheticSpec) -> Result<Vec<Camera>> {
    let golden = 0.618_033_988_749_895;
    (0..spec.cameras)
        .map(|k| {
            let az = 2.0 * PI * k as f64 / spec.cameras as f64;
            let frac = (k as f64 * golden).fract();
            let el = (spec.elevation_min_deg + frac * (spec.elevation_max_deg - spec.elevation_min_deg)).to_radians();
            let eye = spec.orbit_radius * Vector3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
            Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::y(),
                spec.focal_factor * spec.width as f64,
                spec.width,
                spec.height,
            )
        })
        .collect()
}

/// Builds the scene deterministically from `spec` and `seed`.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = ground_truth(&mut rng, spec.gt_gaussians);
    let cfg = RenderConfig {
        background: spec.background,
        ..Default::default()
    };
    let views = orbit_cameras(spec)?
        .into_iter()
        .enumerate()
        .map(|(k, camera)| {
            let image = render_forward(&gt, &camera, &cfg)?.image;
            Ok(View {
                name: format!("view_{k:03}.png"),
                camera,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let pos_noise = Normal::new(0.0, spec.init_jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let col_noise = Normal::new(0.0, spec.color_jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut points = PointSet::default();
    for s in sample_surfaces(&mut rng, spec.init_points) {
        let keep_roll: f64 = rng.random();
        let p = s.p + Vector3::from_fn(|_, _| pos_noise.sample(&mut rng));
        let c = (s.color + Vector3::from_fn(|_, _| col_noise.sample(&mut rng))).map(|v| v.clamp(0.0, 1.0));
        if let Some(m) = &spec.mask {
            if m.contains(&s.p) && keep_roll >= m.keep_fraction {
                continue;
            }
        }
        points.positions.push(p);
        points.colors.push(c);
    }
    if points.len() < 4 {
        return Err(Error::InsufficientPoints {
            required: 4,
            actual: points.len(),
        });
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        seed,
        ground_truth: gt,
        views,
        points,
    })
}
