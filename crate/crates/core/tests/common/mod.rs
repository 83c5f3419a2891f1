//! Shared fixtures and finite-difference oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat_core::gsmath::logit;
use splat_core::renderer::{
    prepare_splats, rasterize, render_backward, render_forward, shift_splat_center, RenderConfig,
};
use splat_core::{sh, Camera, GaussianCloud, Image};

pub const LAMBDA: f64 = 0.2;

/// A random scene of `n` Gaussians seen by one 32x32 camera, plus a random target.
pub struct MicroScene {
    pub cloud: GaussianCloud,
    pub cam: Camera,
    pub target: Image,
    pub cfg: RenderConfig,
}

pub fn micro_scene(seed: u64, n: usize) -> MicroScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let degree = rng.random_range(0..=3usize);
    let eye = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -3.0);
    let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), 36.0, 32, 32).unwrap();
    let mut cloud = GaussianCloud::empty(degree);
    let k = sh::coeff_count(degree);
    for _ in 0..n {
        let pos = Vector3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.6..0.6));
        let ls = Vector3::from_fn(|_, _| rng.random_range(0.06f64..0.25).ln());
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q = q.map(|v| v / qn);
        let mut coeffs = vec![0.0; 3 * k];
        for ch in 0..3 {
            coeffs[ch] = sh::rgb_to_dc(rng.random_range(0.2..0.8));
        }
        for c in coeffs.iter_mut().skip(3) {
            *c = rng.random_range(-0.08..0.08);
        }
        cloud.push(pos, ls, q, logit(rng.random_range(0.2..0.85)), &coeffs);
    }
    let target = Image::from_data(32, 32, (0..32 * 32 * 3).map(|_| rng.random::<f64>()).collect()).unwrap();
    let cfg = RenderConfig {
        background: [rng.random(), rng.random(), rng.random()],
        ..Default::default()
    };
    MicroScene { cloud, cam, target, cfg }
}

/// Loss of `img` plus a fingerprint of everything non-smooth: the
/// participation pattern and the sign of every residual (L1 kinks).
fn fingerprinted_loss(s: &MicroScene, img: &Image, participation: u64) -> (f64, u64) {
    let (l, _) = splat_core::metrics::photometric_loss(img, &s.target, LAMBDA).unwrap();
    let mut h = participation;
    for (a, b) in img.data.iter().zip(&s.target.data) {
        h = (h ^ (a > b) as u64 ^ (((a < b) as u64) << 1)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    (l, h)
}

pub fn loss_and_hash(s: &MicroScene, cloud: &GaussianCloud) -> (f64, u64) {
    let out = render_forward(cloud, &s.cam, &s.cfg).unwrap();
    fingerprinted_loss(s, &out.image, out.participation_hash)
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Fourth-order central difference of `f` around 0. Steps whose evaluations
/// change the participation pattern are shrunk; `None` if no smooth step is found.
pub fn central_difference(mut f: impl FnMut(f64) -> (f64, u64), h0: f64) -> Option<f64> {
    let (_, base) = f(0.0);
    let mut h = h0;
    for _ in 0..5 {
        let pts: Vec<(f64, u64)> = [h, -h, 2.0 * h, -2.0 * h].iter().map(|&d| f(d)).collect();
        if pts.iter().all(|p| p.1 == base) {
            return Some((8.0 * (pts[0].0 - pts[1].0) - (pts[2].0 - pts[3].0)) / (12.0 * h));
        }
        h *= 0.1;
    }
    None
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub worst_what: String,
}

impl GradCheck {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, fd: Option<f64>) {
        match fd {
            None => self.skipped += 1,
            Some(fd) => {
                self.checked += 1;
                let e = rel_err(analytic, fd);
                if e > self.worst || self.worst_what.is_empty() {
                    self.worst = e;
                    self.worst_what = format!("{} analytic {analytic:e} fd {fd:e}", what());
                }
            }
        }
    }
}

/// Checks every parameter gradient and the per-Gaussian NDC gradient of one scene.
pub fn check_scene(s: &MicroScene) -> GradCheck {
    let res = render_backward(&s.cloud, &s.cam, &s.target, LAMBDA, &s.cfg).unwrap();
    let g = &res.grads;
    let mut report = GradCheck::default();
    let h = 1e-4;
    for i in 0..s.cloud.len() {
        for a in 0..3 {
            let fd = central_difference(
                |d| {
                    let mut c = s.cloud.clone();
                    c.positions[i][a] += d;
                    loss_and_hash(s, &c)
                },
                h,
            );
            report.record(|| format!("position[{i}][{a}]"), g.positions[i][a], fd);
            let fd = central_difference(
                |d| {
                    let mut c = s.cloud.clone();
                    c.log_scales[i][a] += d;
                    loss_and_hash(s, &c)
                },
                h,
            );
            report.record(|| format!("log_scale[{i}][{a}]"), g.log_scales[i][a], fd);
        }
        for a in 0..4 {
            let fd = central_difference(
                |d| {
                    let mut c = s.cloud.clone();
                    c.rotations[i][a] += d;
                    loss_and_hash(s, &c)
                },
                h,
            );
            report.record(|| format!("rotation[{i}][{a}]"), g.rotations[i][a], fd);
        }
        let fd = central_difference(
            |d| {
                let mut c = s.cloud.clone();
                c.opacity_logits[i] += d;
                loss_and_hash(s, &c)
            },
            h,
        );
        report.record(|| format!("opacity_logit[{i}]"), g.opacity_logits[i], fd);
        let stride = s.cloud.sh_stride();
        for j in 0..stride {
            let fd = central_difference(
                |d| {
                    let mut c = s.cloud.clone();
                    c.sh_coeffs[i * stride + j] += d;
                    loss_and_hash(s, &c)
                },
                h,
            );
            report.record(|| format!("sh[{i}][{j}]"), g.sh_coeffs[i * stride + j], fd);
        }
    }

    let splats = prepare_splats(&s.cloud, &s.cam, &s.cfg).unwrap();
    let (w, hgt) = (s.cam.width as f64, s.cam.height as f64);
    for (pos, sp) in splats.as_slice().iter().enumerate() {
        let analytic = res.output.per_gaussian_ndc_grad[sp.index];
        for axis in 0..2 {
            let px_per_ndc = if axis == 0 { w / 2.0 } else { hgt / 2.0 };
            let fd = central_difference(
                |d| {
                    let (dx, dy) = if axis == 0 { (d * px_per_ndc, 0.0) } else { (0.0, d * px_per_ndc) };
                    let moved = shift_splat_center(&splats, pos, dx, dy, &s.cam);
                    let r = rasterize(&moved, &s.cam, &s.cfg);
                    fingerprinted_loss(s, &r.image, r.participation_hash)
                },
                1e-4,
            );
            report.record(|| format!("ndc[{}][{axis}]", sp.index), analytic[axis], fd);
        }
    }
    report
}
