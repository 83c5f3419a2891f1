//! Forward alpha-compositing rasterizer and its analytic backward pass.
//!
//! Splats are sorted front to back by camera depth (ties by Gaussian index)
//! and composited per pixel. A splat contributes to a pixel only when the
//! pixel lies strictly inside its influence radius, its alpha reaches 1/255,
//! and the transmittance after compositing it stays at or above 1e-4; the
//! first splat failing the transmittance test terminates the pixel.
//!
//! The image is split into square tiles that are processed independently and
//! merged in tile order, so results do not depend on the thread count. With
//! `tile_size == 0` the whole image is a single tile, which is the reference
//! path; tiling never changes the rendered image.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gsmath::{
    inverse_backward, pixel_per_ndc, project_backward, project_gaussian, view_participates, Cov2D, ProjectedGaussian,
    ProjectedGrad, RadiusMode,
};
use crate::img::Image;
use crate::metrics::photometric_loss;
use crate::scene::GaussianCloud;
use crate::sh;

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub radius_mode: RadiusMode,
    /// Tile edge in pixels; `0` renders the image as one tile.
    pub tile_size: usize,
    /// Highest SH degree evaluated; `None` uses the cloud's degree.
    #[serde(skip)]
    pub active_sh_degree: Option<usize>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            background: [0.0; 3],
            radius_mode: RadiusMode::ThreeSigma,
            tile_size: 16,
            active_sh_degree: None,
        }
    }
}

/// A Gaussian prepared for rasterization in one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    /// Index of the Gaussian in its cloud.
    pub index: usize,
    pub proj: ProjectedGaussian,
    /// Activated opacity.
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Splats ordered front to back by `mu_cam.z`, ties by Gaussian index.
#[derive(Debug, Clone, Default)]
pub struct SortedSplatList {
    splats: Vec<Splat>,
}

impl SortedSplatList {
    pub fn new(splats: Vec<Splat>) -> Self {
        // Sort small keys and permute once; splats are large to move around.
        let mut keys: Vec<(f64, usize, usize)> = splats.iter().enumerate().map(|(k, s)| (s.proj.mu_cam.z, s.index, k)).collect();
        keys.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut slots: Vec<Option<Splat>> = splats.into_iter().map(Some).collect();
        let splats = keys.iter().map(|k| slots[k.2].take().expect("each splat is used once")).collect();
        SortedSplatList { splats }
    }

    pub fn as_slice(&self) -> &[Splat] {
        &self.splats
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }
}

/// Opacity of a projected Gaussian at pixel center `pix`, clamped to [`ALPHA_MAX`].
pub fn pixel_alpha(p: &ProjectedGaussian, pix: (f64, f64), opacity: f64) -> f64 {
    let dx = pix.0 - p.mu_pixel.x;
    let dy = pix.1 - p.mu_pixel.y;
    let q = p.inv_cov2d;
    let power = -0.5 * (q.a * dx * dx + q.c * dy * dy) - q.b * dx * dy;
    (opacity * power.exp()).min(ALPHA_MAX)
}

/// Per-pixel participation: strictly inside the radius, `alpha >= 1/255`, and
/// the transmittance including this splat still `>= 1e-4`.
pub fn pixel_participates(p: &ProjectedGaussian, pix: (f64, f64), alpha: f64, transmittance_so_far: f64) -> bool {
    let dx = pix.0 - p.mu_pixel.x;
    let dy = pix.1 - p.mu_pixel.y;
    (dx * dx + dy * dy).sqrt() < p.radius
        && alpha >= ALPHA_MIN
        && transmittance_so_far * (1.0 - alpha) >= TRANSMITTANCE_MIN
}

/// Per-view result: the image plus per-Gaussian statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// `(dL/d mu_ndc.x, dL/d mu_ndc.y)`; zero for forward-only renders.
    pub per_gaussian_ndc_grad: Vec<[f64; 2]>,
    /// Pixels where the Gaussian participated.
    pub per_gaussian_pixel_count: Vec<u32>,
    /// Whether the Gaussian participated in this view at all.
    pub per_gaussian_view_flag: Vec<bool>,
    /// Camera-space depth `mu_cam.z` (meaningful when the view flag is set).
    pub per_gaussian_depth: Vec<f64>,
    /// Influence radius in pixels (0 when not participating).
    pub per_gaussian_radius: Vec<f64>,
    /// Transmittance left after the last composited splat, per pixel.
    pub final_transmittance: Vec<f64>,
    /// `sum_i alpha_i T_i`, per pixel.
    pub accumulated_alpha: Vec<f64>,
    /// Hash of every (pixel, splat) compositing decision; changes whenever a
    /// participation test flips.
    pub participation_hash: u64,
}

/// Gradients w.r.t. every learnable parameter of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrads {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
}

impl CloudGrads {
    pub fn zeros_like(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        CloudGrads {
            positions: vec![Vector3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            sh_coeffs: vec![0.0; cloud.sh_coeffs.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub loss: f64,
    pub grads: CloudGrads,
    pub output: RenderOutput,
}

/// Per-Gaussian data computed while preparing a view.
struct ViewPrep {
    splats: SortedSplatList,
    projections: Vec<Option<ProjectedGaussian>>,
    /// Unnormalized view vector and per-channel clamp flags, per Gaussian.
    color_state: Vec<(Vector3<f64>, [bool; 3])>,
    sh_degree: usize,
}

fn active_degree(cloud: &GaussianCloud, cfg: &RenderConfig) -> usize {
    cfg.active_sh_degree.map_or(cloud.sh_degree, |d| d.min(cloud.sh_degree))
}

fn prepare(cloud: &GaussianCloud, cam: &Camera, cfg: &RenderConfig) -> Result<ViewPrep> {
    cam.validate()?;
    let degree = active_degree(cloud, cfg);
    let center = cam.center();
    let per: Vec<Result<Option<(Splat, Vector3<f64>, [bool; 3])>>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let proj = project_gaussian(&cloud.params(i), cam, cfg.radius_mode)?;
            if !view_participates(&proj, cam) {
                return Ok(None);
            }
            let v = cloud.positions[i] - center;
            let dir = v / v.norm();
            let raw = sh::eval_color(degree, cloud.sh(i), &dir);
            let mut color = [0.0; 3];
            let mut clamped = [false; 3];
            for ch in 0..3 {
                clamped[ch] = !(0.0..=1.0).contains(&raw[ch]);
                color[ch] = raw[ch].clamp(0.0, 1.0);
            }
            Ok(Some((
                Splat {
                    index: i,
                    proj,
                    opacity: cloud.opacity(i),
                    color,
                },
                v,
                clamped,
            )))
        })
        .collect();
    let mut splats = Vec::new();
    let mut projections = vec![None; cloud.len()];
    let mut color_state = vec![(Vector3::zeros(), [false; 3]); cloud.len()];
    for (i, r) in per.into_iter().enumerate() {
        if let Some((s, v, c)) = r? {
            projections[i] = Some(s.proj);
            color_state[i] = (v, c);
            splats.push(s);
        }
    }
    Ok(ViewPrep {
        splats: SortedSplatList::new(splats),
        projections,
        color_state,
        sh_degree: degree,
    })
}

/// Flattened splat used by the inner loops.
#[derive(Clone, Copy)]
struct RasterSplat {
    mx: f64,
    my: f64,
    conic: Cov2D,
    radius: f64,
    opacity: f64,
    color: [f64; 3],
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
}

struct Bins {
    tiles: Vec<TileBin>,
    raster: Vec<RasterSplat>,
}

struct TileBin {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Positions into the sorted splat list, front to back.
    splats: Vec<u32>,
}

fn bin_splats(splats: &[Splat], cam: &Camera, tile_size: usize) -> Bins {
    let (w, h) = (cam.width, cam.height);
    let ts_x = if tile_size == 0 { w } else { tile_size };
    let ts_y = if tile_size == 0 { h } else { tile_size };
    let tx = w.div_ceil(ts_x);
    let ty = h.div_ceil(ts_y);
    let mut tiles: Vec<TileBin> = (0..tx * ty)
        .map(|t| {
            let (cx, cy) = (t % tx, t / tx);
            TileBin {
                x0: cx * ts_x,
                y0: cy * ts_y,
                x1: ((cx + 1) * ts_x).min(w),
                y1: ((cy + 1) * ts_y).min(h),
                splats: Vec::new(),
            }
        })
        .collect();
    let mut raster = Vec::with_capacity(splats.len());
    for (pos, s) in splats.iter().enumerate() {
        let p = &s.proj;
        let r = p.radius;
        // Pixels with |px - mx| < r.
        let x0 = ((p.mu_pixel.x - r).floor() as i64 + 1).max(0);
        let x1 = ((p.mu_pixel.x + r).ceil() as i64 - 1).min(w as i64 - 1);
        let y0 = ((p.mu_pixel.y - r).floor() as i64 + 1).max(0);
        let y1 = ((p.mu_pixel.y + r).ceil() as i64 - 1).min(h as i64 - 1);
        raster.push(RasterSplat {
            mx: p.mu_pixel.x,
            my: p.mu_pixel.y,
            conic: p.inv_cov2d,
            radius: r,
            opacity: s.opacity,
            color: s.color,
            x0,
            x1,
            y0,
            y1,
        });
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for cy in (y0 as usize / ts_y)..=(y1 as usize / ts_y) {
            for cx in (x0 as usize / ts_x)..=(x1 as usize / ts_x) {
                tiles[cy * tx + cx].splats.push(pos as u32);
            }
        }
    }
    Bins { tiles, raster }
}

/// Evaluates one splat at a pixel. Returns `(alpha, gaussian, clamped)` if the
/// splat passes the radius and minimum-alpha tests.
#[inline]
fn splat_alpha(s: &RasterSplat, px: f64, py: f64) -> Option<(f64, f64, bool)> {
    let dx = px - s.mx;
    let dy = py - s.my;
    if !((dx * dx + dy * dy).sqrt() < s.radius) {
        return None;
    }
    let power = -0.5 * (s.conic.a * dx * dx + s.conic.c * dy * dy) - s.conic.b * dx * dy;
    let g = power.exp();
    let raw = s.opacity * g;
    let alpha = raw.min(ALPHA_MAX);
    if !(alpha >= ALPHA_MIN) {
        return None;
    }
    Some((alpha, g, raw > ALPHA_MAX))
}

/// `(local, pos)` of the tile's splats whose pixel rows include `y`, in depth order.
fn row_splats(tile: &TileBin, bins: &Bins, y: usize, out: &mut Vec<(usize, u32)>) {
    out.clear();
    let y = y as i64;
    for (local, &pos) in tile.splats.iter().enumerate() {
        let s = &bins.raster[pos as usize];
        if s.y0 <= y && y <= s.y1 {
            out.push((local, pos));
        }
    }
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3)
}

struct TileForward {
    colors: Vec<[f64; 3]>,
    t_final: Vec<f64>,
    acc: Vec<f64>,
    counts: Vec<u32>,
    hash: u64,
}

fn tile_forward(tile: &TileBin, bins: &Bins, bg: [f64; 3]) -> TileForward {
    let npx = (tile.x1 - tile.x0) * (tile.y1 - tile.y0);
    let mut out = TileForward {
        colors: Vec::with_capacity(npx),
        t_final: Vec::with_capacity(npx),
        acc: Vec::with_capacity(npx),
        counts: vec![0; tile.splats.len()],
        hash: 0xcbf2_9ce4_8422_2325,
    };
    let mut row = Vec::new();
    for y in tile.y0..tile.y1 {
        row_splats(tile, bins, y, &mut row);
        for x in tile.x0..tile.x1 {
            let (px, py) = (x as f64, y as f64);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut acc = 0.0;
            for &(local, pos) in &row {
                let s = &bins.raster[pos as usize];
                if (x as i64) < s.x0 || (x as i64) > s.x1 {
                    continue;
                }
                let Some((alpha, _, _)) = splat_alpha(s, px, py) else { continue };
                let test_t = t * (1.0 - alpha);
                if test_t < TRANSMITTANCE_MIN {
                    out.hash = mix(out.hash, (pos as u64) << 1 | 1);
                    break;
                }
                let w = alpha * t;
                for ch in 0..3 {
                    c[ch] += s.color[ch] * w;
                }
                acc += w;
                t = test_t;
                out.counts[local] += 1;
                out.hash = mix(out.hash, (pos as u64) << 1);
            }
            for ch in 0..3 {
                c[ch] = (c[ch] + t * bg[ch]).clamp(0.0, 1.0);
            }
            out.hash = mix(out.hash, (y * 65_537 + x) as u64);
            out.colors.push(c);
            out.t_final.push(t);
            out.acc.push(acc);
        }
    }
    out
}

/// Per-splat gradient accumulators for one tile.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

struct Contribution {
    local: usize,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    t: f64,
    dx: f64,
    dy: f64,
}

fn tile_backward(tile: &TileBin, bins: &Bins, bg: [f64; 3], d_image: &Image, width: usize) -> Vec<SplatGrad> {
    let mut grads = vec![SplatGrad::default(); tile.splats.len()];
    let mut stack: Vec<Contribution> = Vec::new();
    let mut row = Vec::new();
    for y in tile.y0..tile.y1 {
        row_splats(tile, bins, y, &mut row);
        for x in tile.x0..tile.x1 {
            let (px, py) = (x as f64, y as f64);
            stack.clear();
            let mut t = 1.0;
            for &(local, pos) in &row {
                let s = &bins.raster[pos as usize];
                if (x as i64) < s.x0 || (x as i64) > s.x1 {
                    continue;
                }
                let Some((alpha, gauss, clamped)) = splat_alpha(s, px, py) else { continue };
                let test_t = t * (1.0 - alpha);
                if test_t < TRANSMITTANCE_MIN {
                    break;
                }
                stack.push(Contribution {
                    local,
                    alpha,
                    gauss,
                    clamped,
                    t,
                    dx: px - s.mx,
                    dy: py - s.my,
                });
                t = test_t;
            }
            let pi = (y * width + x) * 3;
            let g = [d_image.data[pi], d_image.data[pi + 1], d_image.data[pi + 2]];
            // Color of everything behind the current splat, in its own frame.
            let mut behind = bg;
            for c in stack.iter().rev() {
                let s = &bins.raster[tile.splats[c.local] as usize];
                let sg = &mut grads[c.local];
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    d_alpha += g[ch] * (s.color[ch] - behind[ch]);
                    sg.color[ch] += g[ch] * c.alpha * c.t;
                }
                d_alpha *= c.t;
                for ch in 0..3 {
                    behind[ch] = c.alpha * s.color[ch] + (1.0 - c.alpha) * behind[ch];
                }
                if c.clamped {
                    continue;
                }
                sg.opacity += d_alpha * c.gauss;
                let d_power = d_alpha * c.alpha;
                let q = s.conic;
                // d power / d mean = conic * d
                sg.mean[0] += d_power * (q.a * c.dx + q.b * c.dy);
                sg.mean[1] += d_power * (q.b * c.dx + q.c * c.dy);
                sg.conic[0] += d_power * (-0.5 * c.dx * c.dx);
                sg.conic[1] += d_power * (-c.dx * c.dy);
                sg.conic[2] += d_power * (-0.5 * c.dy * c.dy);
            }
        }
    }
    grads
}

/// Result of rasterizing a prepared splat list.
pub struct Raster {
    pub image: Image,
    /// Indexed by position in the sorted list.
    pub pixel_counts: Vec<u32>,
    pub final_transmittance: Vec<f64>,
    pub accumulated_alpha: Vec<f64>,
    pub participation_hash: u64,
}

/// Forward compositing of a sorted splat list.
pub fn rasterize(splats: &SortedSplatList, cam: &Camera, cfg: &RenderConfig) -> Raster {
    let bins = bin_splats(splats.as_slice(), cam, cfg.tile_size);
    let tiles: Vec<TileForward> = bins.tiles.par_iter().map(|t| tile_forward(t, &bins, cfg.background)).collect();
    let (w, h) = (cam.width, cam.height);
    let mut image = Image::new(w, h);
    let mut t_final = vec![0.0; w * h];
    let mut acc = vec![0.0; w * h];
    let mut counts = vec![0u32; splats.len()];
    let mut hash = 0u64;
    for (tile, res) in bins.tiles.iter().zip(tiles) {
        let mut k = 0;
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                let p = y * w + x;
                image.data[p * 3..p * 3 + 3].copy_from_slice(&res.colors[k]);
                t_final[p] = res.t_final[k];
                acc[p] = res.acc[k];
                k += 1;
            }
        }
        for (local, &pos) in tile.splats.iter().enumerate() {
            counts[pos as usize] += res.counts[local];
        }
        hash = mix(hash, res.hash);
    }
    Raster {
        image,
        pixel_counts: counts,
        final_transmittance: t_final,
        accumulated_alpha: acc,
        participation_hash: hash,
    }
}

/// Gradients w.r.t. the 2D quantities of each splat, indexed by sorted position.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGradient {
    /// dL / d(mu_pixel.x, mu_pixel.y) through alpha only.
    pub mean_px: Vector2<f64>,
    /// dL / d(inverse covariance entries A, B, C).
    pub conic: Cov2D,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Backward pass of [`rasterize`] given `dL/d image`.
pub fn rasterize_backward(splats: &SortedSplatList, cam: &Camera, cfg: &RenderConfig, d_image: &Image) -> Vec<SplatGradient> {
    let bins = bin_splats(splats.as_slice(), cam, cfg.tile_size);
    let tiles: Vec<Vec<SplatGrad>> = bins
        .tiles
        .par_iter()
        .map(|t| tile_backward(t, &bins, cfg.background, d_image, cam.width))
        .collect();
    let mut out = vec![SplatGradient::default(); splats.len()];
    for (tile, grads) in bins.tiles.iter().zip(tiles) {
        for (local, &pos) in tile.splats.iter().enumerate() {
            let g = &grads[local];
            let o = &mut out[pos as usize];
            o.mean_px.x += g.mean[0];
            o.mean_px.y += g.mean[1];
            o.conic.a += g.conic[0];
            o.conic.b += g.conic[1];
            o.conic.c += g.conic[2];
            o.opacity += g.opacity;
            for ch in 0..3 {
                o.color[ch] += g.color[ch];
            }
        }
    }
    out
}

/// Projects, sorts and colors every Gaussian participating in `cam`.
pub fn prepare_splats(cloud: &GaussianCloud, cam: &Camera, cfg: &RenderConfig) -> Result<SortedSplatList> {
    Ok(prepare(cloud, cam, cfg)?.splats)
}

fn output_from(cloud: &GaussianCloud, prep: &ViewPrep, raster: Raster) -> RenderOutput {
    let n = cloud.len();
    let mut out = RenderOutput {
        image: raster.image,
        per_gaussian_ndc_grad: vec![[0.0; 2]; n],
        per_gaussian_pixel_count: vec![0; n],
        per_gaussian_view_flag: vec![false; n],
        per_gaussian_depth: vec![0.0; n],
        per_gaussian_radius: vec![0.0; n],
        final_transmittance: raster.final_transmittance,
        accumulated_alpha: raster.accumulated_alpha,
        participation_hash: raster.participation_hash,
    };
    for (pos, s) in prep.splats.as_slice().iter().enumerate() {
        out.per_gaussian_view_flag[s.index] = true;
        out.per_gaussian_pixel_count[s.index] = raster.pixel_counts[pos];
        out.per_gaussian_depth[s.index] = s.proj.mu_cam.z;
        out.per_gaussian_radius[s.index] = s.proj.radius;
    }
    out
}

/// Renders the cloud; per-Gaussian NDC gradients are left at zero.
pub fn render_forward(cloud: &GaussianCloud, cam: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    let prep = prepare(cloud, cam, cfg)?;
    let raster = rasterize(&prep.splats, cam, cfg);
    Ok(output_from(cloud, &prep, raster))
}

/// Renders, evaluates the photometric loss against `target`, and back-propagates
/// to every Gaussian parameter. The per-Gaussian NDC gradient collects only the
/// alpha path of the pixel center, summed over participating pixels.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    target: &Image,
    lambda_dssim: f64,
    cfg: &RenderConfig,
) -> Result<BackwardResult> {
    if target.width != cam.width || target.height != cam.height {
        return Err(Error::invalid(format!(
            "target is {}x{} but camera renders {}x{}",
            target.width, target.height, cam.width, cam.height
        )));
    }
    let prep = prepare(cloud, cam, cfg)?;
    let raster = rasterize(&prep.splats, cam, cfg);
    let (loss, d_image) = photometric_loss(&raster.image, target, lambda_dssim)?;
    let splat_grads = rasterize_backward(&prep.splats, cam, cfg, &d_image);
    let mut output = output_from(cloud, &prep, raster);
    let mut grads = CloudGrads::zeros_like(cloud);

    let k_count = sh::coeff_count(prep.sh_degree);
    let sx = pixel_per_ndc(cam.width);
    let sy = pixel_per_ndc(cam.height);
    let per: Vec<Result<(usize, Vector3<f64>, Vector3<f64>, [f64; 4], f64, Vec<f64>)>> = prep
        .splats
        .as_slice()
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(s, sg)| {
            let i = s.index;
            let proj = prep.projections[i].expect("participating gaussian has a projection");
            let d_cov = inverse_backward(&proj.cov2d, &sg.conic);
            let geo = project_backward(
                &cloud.params(i),
                cam,
                &ProjectedGrad {
                    mean_px: sg.mean_px,
                    cov2d: d_cov,
                },
            )?;
            let mut d_pos = geo.position;

            let (v, clamped) = prep.color_state[i];
            let mut d_color = sg.color;
            for ch in 0..3 {
                if clamped[ch] {
                    d_color[ch] = 0.0;
                }
            }
            let norm = v.norm();
            let dir = v / norm;
            let mut basis = [0.0; 16];
            let mut basis_grad = [Vector3::zeros(); 16];
            sh::basis(prep.sh_degree, &dir, &mut basis, Some(&mut basis_grad));
            let coeffs = cloud.sh(i);
            let mut d_sh = vec![0.0; coeffs.len()];
            let mut d_dir = Vector3::zeros();
            for k in 0..k_count {
                for ch in 0..3 {
                    d_sh[k * 3 + ch] = basis[k] * d_color[ch];
                    d_dir += basis_grad[k] * (coeffs[k * 3 + ch] * d_color[ch]);
                }
            }
            d_pos += (d_dir - dir * dir.dot(&d_dir)) / norm;

            let o = s.opacity;
            let d_logit = sg.opacity * o * (1.0 - o);
            Ok((i, d_pos, geo.log_scale, geo.rotation, d_logit, d_sh))
        })
        .collect();
    let stride = cloud.sh_stride();
    for r in per {
        let (i, d_pos, d_ls, d_rot, d_logit, d_sh) = r?;
        grads.positions[i] = d_pos;
        grads.log_scales[i] = d_ls;
        grads.rotations[i] = d_rot;
        grads.opacity_logits[i] = d_logit;
        grads.sh_coeffs[i * stride..(i + 1) * stride].copy_from_slice(&d_sh);
    }
    for (s, sg) in prep.splats.as_slice().iter().zip(&splat_grads) {
        output.per_gaussian_ndc_grad[s.index] = [sg.mean_px.x * sx, sg.mean_px.y * sy];
    }
    Ok(BackwardResult { loss, grads, output })
}

/// Replaces the splat at sorted position `pos` with a shifted pixel center.
pub fn shift_splat_center(splats: &SortedSplatList, pos: usize, dx: f64, dy: f64, cam: &Camera) -> SortedSplatList {
    let mut v = splats.splats.clone();
    let p = v[pos].proj;
    v[pos].proj = p.with_pixel_center(p.mu_pixel.x + dx, p.mu_pixel.y + dy, cam);
    SortedSplatList { splats: v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsmath::{logit, RadiusMode};
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn cam(w: usize, h: usize, f: f64) -> Camera {
        Camera::new(f, f, w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, w, h, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    fn cloud_with(items: &[(Vector3<f64>, f64, f64, [f64; 3])]) -> GaussianCloud {
        let mut c = GaussianCloud::empty(0);
        for (p, s, o, rgb) in items {
            let coeffs = [sh::rgb_to_dc(rgb[0]), sh::rgb_to_dc(rgb[1]), sh::rgb_to_dc(rgb[2])];
            c.push(*p, Vector3::repeat(s.ln()), [1.0, 0.0, 0.0, 0.0], logit(*o), &coeffs);
        }
        c
    }

    fn unit_projection(alpha_center: (f64, f64)) -> ProjectedGaussian {
        ProjectedGaussian {
            mu_pixel: Vector3::new(alpha_center.0, alpha_center.1, 1.0),
            mu_cam: Vector3::new(0.0, 0.0, 1.0),
            mu_ndc: Vector3::zeros(),
            cov2d: Cov2D::new(1.0, 0.0, 1.0),
            inv_cov2d: Cov2D::new(1.0, 0.0, 1.0),
            radius: 3.0,
        }
    }

    #[test]
    fn alpha_examples() {
        let p = unit_projection((5.0, 5.0));
        assert_relative_eq!(pixel_alpha(&p, (5.0, 5.0), 0.7), 0.7);
        assert_relative_eq!(pixel_alpha(&p, (6.0, 5.0), 1.0), (-0.5f64).exp().min(0.99));
        assert_relative_eq!(pixel_alpha(&p, (6.0, 5.0), 1.0), 0.6065306597126334, epsilon = 1e-15);
        assert_eq!(pixel_alpha(&p, (6.0, 7.0), 0.0), 0.0);
        assert_eq!(pixel_alpha(&p, (5.0, 5.0), 1.0), ALPHA_MAX);
    }

    #[test]
    fn participation_examples() {
        let p = unit_projection((5.0, 5.0));
        assert!(pixel_participates(&p, (5.0, 5.0), 1.0 / 255.0, 1.0));
        assert!(!pixel_participates(&p, (5.0, 5.0), 0.9 / 255.0, 1.0));
        assert!(!pixel_participates(&p, (8.0, 5.0), 0.5, 1.0));
        assert!(pixel_participates(&p, (7.999, 5.0), 0.5, 1.0));
        assert!(!pixel_participates(&p, (5.0, 5.0), 0.5, 9.9e-5));
    }

    #[test]
    fn empty_cloud_renders_background() {
        let c = GaussianCloud::empty(1);
        let cfg = RenderConfig {
            background: [0.2, 0.3, 0.4],
            ..Default::default()
        };
        let out = render_forward(&c, &cam(9, 7, 10.0), &cfg).unwrap();
        assert_eq!(out.image, Image::filled(9, 7, [0.2, 0.3, 0.4]));
        assert!(out.per_gaussian_pixel_count.is_empty());
    }

    #[test]
    fn single_opaque_splat() {
        // Tiny, fully opaque white splat centered on pixel (4, 4); the screen
        // dilation spreads it over the 3x3 neighborhood.
        let c = cloud_with(&[(Vector3::new(0.0, 0.0, 1.0), 1e-4, 0.999_999, [1.0; 3])]);
        let out = render_forward(&c, &cam(9, 9, 10.0), &RenderConfig::default()).unwrap();
        let px = out.image.pixel(4, 4);
        assert_relative_eq!(px[0], 0.99, epsilon = 1e-12);
        assert!(out.image.pixel(5, 4)[0] < 0.2);
        assert_eq!(out.per_gaussian_pixel_count[0], 9);
        assert_eq!(out.image.pixel(0, 0), [0.0; 3]);
    }

    #[test]
    fn two_layer_compositing() {
        let bg = [0.1, 0.1, 0.1];
        let c = cloud_with(&[
            (Vector3::new(0.0, 0.0, 2.0), 1e-4, 0.5, [0.0, 1.0, 0.0]),
            (Vector3::new(0.0, 0.0, 1.0), 1e-4, 0.5, [1.0, 0.0, 0.0]),
        ]);
        let cfg = RenderConfig {
            background: bg,
            ..Default::default()
        };
        let px = render_forward(&c, &cam(9, 9, 10.0), &cfg).unwrap().image.pixel(4, 4);
        assert_relative_eq!(px[0], 0.5 + 0.25 * 0.1, epsilon = 1e-12);
        assert_relative_eq!(px[1], 0.25 + 0.25 * 0.1, epsilon = 1e-12);
        assert_relative_eq!(px[2], 0.25 * 0.1, epsilon = 1e-12);
    }

    #[test]
    fn occluded_splat_gets_no_pixels_or_gradient() {
        // Two clamped walls bring transmittance to 1e-4 and stop the pixel.
        let c = cloud_with(&[
            (Vector3::new(0.0, 0.0, 1.0), 2.0, 0.999_999, [1.0, 0.0, 0.0]),
            (Vector3::new(0.0, 0.0, 1.5), 3.0, 0.999_999, [0.0, 1.0, 0.0]),
            (Vector3::new(0.0, 0.0, 3.0), 1e-4, 0.8, [0.0, 0.0, 1.0]),
        ]);
        let cm = cam(9, 9, 10.0);
        let target = Image::filled(9, 9, [0.5; 3]);
        let res = render_backward(&c, &cm, &target, 0.2, &RenderConfig::default()).unwrap();
        assert_eq!(res.output.per_gaussian_pixel_count[2], 0);
        assert!(res.output.per_gaussian_view_flag[2]);
        assert_eq!(res.output.per_gaussian_ndc_grad[2], [0.0, 0.0]);
        assert_eq!(res.grads.positions[2], Vector3::zeros());
    }

    #[test]
    fn zero_loss_zero_gradients() {
        let c = cloud_with(&[
            (Vector3::new(0.05, 0.0, 2.0), 0.05, 0.6, [0.3, 0.6, 0.2]),
            (Vector3::new(-0.1, 0.05, 2.5), 0.08, 0.4, [0.8, 0.1, 0.5]),
        ]);
        let cm = cam(16, 16, 20.0);
        let cfg = RenderConfig::default();
        let target = render_forward(&c, &cm, &cfg).unwrap().image;
        let res = render_backward(&c, &cm, &target, 0.2, &cfg).unwrap();
        assert_relative_eq!(res.loss, 0.0, epsilon = 1e-12);
        for g in &res.grads.positions {
            assert!(g.norm() < 1e-10);
        }
        assert!(res.grads.sh_coeffs.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn tiling_does_not_change_the_image() {
        let mut items = Vec::new();
        for k in 0..30 {
            let t = k as f64 * 0.37;
            items.push((
                Vector3::new(0.4 * t.sin(), 0.3 * (1.3 * t).cos(), 2.0 + 0.1 * k as f64),
                0.03 + 0.01 * (k % 5) as f64,
                0.2 + 0.02 * k as f64,
                [0.5 + 0.4 * t.sin(), 0.3, 0.5 + 0.4 * t.cos()],
            ));
        }
        let c = cloud_with(&items);
        let cm = cam(37, 29, 30.0);
        let reference = RenderConfig {
            tile_size: 0,
            ..Default::default()
        };
        let base = render_forward(&c, &cm, &reference).unwrap();
        for ts in [1, 7, 16] {
            let cfg = RenderConfig {
                tile_size: ts,
                ..Default::default()
            };
            let o = render_forward(&c, &cm, &cfg).unwrap();
            assert_eq!(o.image, base.image);
            assert_eq!(o.per_gaussian_pixel_count, base.per_gaussian_pixel_count);
        }
        for (a, t) in base.accumulated_alpha.iter().zip(&base.final_transmittance) {
            assert!((a + t - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn radius_mode_is_honored() {
        let c = cloud_with(&[(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, [1.0; 3])]);
        let cm = cam(32, 32, 40.0);
        let three = render_forward(&c, &cm, &RenderConfig::default()).unwrap();
        let literal = render_forward(
            &c,
            &cm,
            &RenderConfig {
                radius_mode: RadiusMode::ThreeLambda,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(literal.per_gaussian_radius[0] > three.per_gaussian_radius[0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let c = GaussianCloud::empty(0);
        let r = render_backward(&c, &cam(8, 8, 5.0), &Image::new(4, 4), 0.2, &RenderConfig::default());
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
