//! The optimization loop: one shuffled training view per iteration, Adam
//! updates, and densification on a fixed schedule.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::densify::{densify_event, gradient_scale_factor, reset_opacity, write_trace, DensifyAccumulator, DensifyConfig};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::metrics::{psnr, ssim};
use crate::optim::{Adam, AdamConfig, StepSizes};
use crate::ply::{save_ply, Precision};
use crate::renderer::{render_backward, render_forward, RenderConfig};
use crate::scene::{scene_radius, GaussianCloud, SceneBounds};
use crate::sh;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    /// Multiply the position rates by the scene extent.
    pub position_scale_by_extent: bool,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
    /// Higher-order SH coefficients use `sh / sh_rest_divisor`.
    pub sh_rest_divisor: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            position_scale_by_extent: true,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            sh_rest_divisor: 20.0,
        }
    }
}

impl LearningRates {
    /// Step sizes at 0-based `step` of `total`, with log-linear position decay.
    pub fn at(&self, step: usize, total: usize, extent: f64) -> StepSizes {
        let t = if total <= 1 { 1.0 } else { (step as f64 / (total - 1) as f64).clamp(0.0, 1.0) };
        let mut position = ((1.0 - t) * self.position_init.ln() + t * self.position_final.ln()).exp();
        if self.position_scale_by_extent {
            position *= extent;
        }
        StepSizes {
            position,
            scale: self.scale,
            rotation: self.rotation,
            opacity: self.opacity,
            sh_dc: self.sh,
            sh_rest: self.sh / self.sh_rest_divisor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub sh_degree: usize,
    /// Iterations between SH degree increments; `0` uses the full degree from the start.
    pub sh_degree_interval: usize,
    pub lambda_dssim: f64,
    /// Test-set evaluation period; `0` evaluates only at the end.
    pub eval_every: usize,
    /// Checkpoint period when an output directory is given; `0` disables.
    pub checkpoint_every: usize,
    /// Write the per-event densification trace CSV.
    pub densify_trace: bool,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub densify: DensifyConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 7000,
            seed: 0,
            sh_degree: 1,
            sh_degree_interval: 1000,
            lambda_dssim: 0.2,
            eval_every: 0,
            checkpoint_every: 0,
            densify_trace: false,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            densify: DensifyConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        let lr = &self.lr;
        for (name, v) in [
            ("lr.position_init", lr.position_init),
            ("lr.position_final", lr.position_final),
            ("lr.scale", lr.scale),
            ("lr.rotation", lr.rotation),
            ("lr.opacity", lr.opacity),
            ("lr.sh", lr.sh),
            ("lr.sh_rest_divisor", lr.sh_rest_divisor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::Config(format!("sh_degree must be <= {}", sh::MAX_SH_DEGREE)));
        }
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::Config("lambda_dssim must be in [0, 1]".into()));
        }
        self.densify.validate()
    }

    /// Stable hash of the serialized configuration.
    pub fn hash(&self) -> u64 {
        let text = toml::to_string(self).expect("config serializes");
        text.bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

/// A posed training or test image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: Image,
}

/// Indices `{0, 8, 16, ...}` go to the test set, the rest to training.
pub fn every_eighth_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % 8 != 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub iteration: usize,
    /// Mean PSNR in dB; infinite when every render matches its target exactly.
    pub psnr: f64,
    pub ssim: f64,
    pub gaussian_count: usize,
    pub peak_memory_estimate: u64,
    pub wall_time: f64,
}

impl MetricsReport {
    /// Equality of everything except wall time.
    pub fn same_results(&self, other: &MetricsReport) -> bool {
        self.iteration == other.iteration
            && self.psnr.to_bits() == other.psnr.to_bits()
            && self.ssim.to_bits() == other.ssim.to_bits()
            && self.gaussian_count == other.gaussian_count
            && self.peak_memory_estimate == other.peak_memory_estimate
    }
}

/// Bytes held by the trainer for `n` Gaussians: parameters, gradients and two
/// Adam moments per scalar, the densification statistics, and the images.
pub fn memory_estimate(n: usize, sh_stride: usize, image_values: usize) -> u64 {
    let scalars = 3 + 3 + 4 + 1 + sh_stride;
    let per_gaussian = scalars * 4 * 8 + 4 * 8 + 2 * 8;
    (n * per_gaussian + image_values * 8) as u64
}

/// Mean PSNR and SSIM of `cloud` over `views`.
pub fn evaluate(cloud: &GaussianCloud, views: &[View], cfg: &RenderConfig) -> Result<MetricsReport> {
    if views.is_empty() {
        return Err(Error::invalid("evaluation needs at least one view"));
    }
    let start = Instant::now();
    let mut p = 0.0;
    let mut s = 0.0;
    let mut pixels = 0;
    for v in views {
        let out = render_forward(cloud, &v.camera, cfg)?;
        p += psnr(&out.image, &v.image)?;
        s += ssim(&out.image, &v.image)?;
        pixels = pixels.max(v.image.data.len());
    }
    let n = views.len() as f64;
    Ok(MetricsReport {
        iteration: 0,
        psnr: p / n,
        ssim: s / n,
        gaussian_count: cloud.len(),
        peak_memory_estimate: memory_estimate(cloud.len(), cloud.sh_stride(), pixels),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventSummary {
    pub iteration: usize,
    pub grown: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub gaussians_after: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub cloud: GaussianCloud,
    /// Evaluations in iteration order; the last one is the final report.
    pub timeline: Vec<MetricsReport>,
    pub events: Vec<EventSummary>,
    pub bounds: SceneBounds,
}

impl TrainOutcome {
    pub fn final_report(&self) -> &MetricsReport {
        self.timeline.last().expect("training always records a final report")
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    (seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)).rotate_left(17)
}

/// Trains `init` on `train_views`. Metrics are computed on `test_views`, or on
/// the training views when no test views are given. With `out_dir`, writes
/// `metrics.csv`, optional checkpoints and the optional densification trace.
pub fn train(
    init: GaussianCloud,
    train_views: &[View],
    test_views: &[View],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_views.is_empty() {
        return Err(Error::invalid("training needs at least one view"));
    }
    init.validate()?;
    let start = Instant::now();
    let cameras: Vec<Camera> = train_views.iter().map(|v| v.camera.clone()).collect();
    let bounds = scene_radius(&cameras)?;
    let eval_views = if test_views.is_empty() { train_views } else { test_views };
    let image_values: usize = train_views.iter().chain(test_views).map(|v| v.image.data.len()).sum();

    let mut cloud = init;
    let mut adam = Adam::new(cfg.adam, &cloud);
    let mut acc = DensifyAccumulator::new(cloud.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut timeline = Vec::new();
    let mut events = Vec::new();
    let mut peak = memory_estimate(cloud.len(), cloud.sh_stride(), image_values);
    let dcfg = &cfg.densify;

    let mut trace_file = match (out_dir, cfg.densify_trace) {
        (Some(dir), true) => Some(std::io::BufWriter::new(std::fs::File::create(dir.join("densify_trace.csv"))?)),
        _ => None,
    };
    let mut trace_header = true;

    for it in 1..=cfg.iterations {
        if order.is_empty() {
            order = (0..train_views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let vi = order.pop().expect("refilled above");
        let view = &train_views[vi];
        let mut rcfg = cfg.render.clone();
        rcfg.active_sh_degree = Some(if cfg.sh_degree_interval == 0 {
            cloud.sh_degree
        } else {
            ((it - 1) / cfg.sh_degree_interval).min(cloud.sh_degree)
        });

        let mut res = render_backward(&cloud, &view.camera, &view.image, cfg.lambda_dssim, &rcfg)?;
        if !res.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                view: vi,
                gaussians: cloud.len(),
                loss: res.loss,
            });
        }
        if it <= dcfg.stop_iter {
            acc.accumulate_view(&res.output, &res.output.per_gaussian_depth, dcfg, &bounds)?;
        }
        if dcfg.scale_optimizer_gradients && dcfg.strategy.depth_scaled() {
            for i in 0..cloud.len() {
                if res.output.per_gaussian_view_flag[i] {
                    res.grads.positions[i] *= gradient_scale_factor(res.output.per_gaussian_depth[i], &bounds, dcfg.gamma_depth);
                }
            }
        }
        adam.step(&mut cloud, &res.grads, &cfg.lr.at(it - 1, cfg.iterations, bounds.extent()));

        if dcfg.is_event(it) {
            let ev = densify_event(
                &mut cloud,
                &mut acc,
                &bounds,
                dcfg,
                it,
                mix_seed(cfg.seed, it as u64),
                it > dcfg.opacity_reset_interval,
                trace_file.is_some(),
            )?;
            adam.remap(&ev.sources);
            if let Some(f) = trace_file.as_mut() {
                write_trace(&mut *f, &ev.trace, trace_header)?;
                trace_header = false;
            }
            log::debug!(
                "iteration {it}: grew {} (clone {}, split {}), pruned {}, {} gaussians",
                ev.grown,
                ev.cloned,
                ev.split,
                ev.pruned,
                cloud.len()
            );
            events.push(EventSummary {
                iteration: it,
                grown: ev.grown,
                cloned: ev.cloned,
                split: ev.split,
                pruned: ev.pruned,
                gaussians_after: cloud.len(),
            });
        }
        if dcfg.opacity_reset_interval > 0 && it % dcfg.opacity_reset_interval == 0 && it <= dcfg.stop_iter {
            reset_opacity(&mut cloud, dcfg.opacity_reset_value);
        }
        peak = peak.max(memory_estimate(cloud.len(), cloud.sh_stride(), image_values));

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
                write_checkpoint(dir, it, &cloud, &adam, cfg)?;
            }
        }
        let last = it == cfg.iterations;
        if last || (cfg.eval_every > 0 && it % cfg.eval_every == 0) {
            let mut rep = evaluate(&cloud, eval_views, &cfg.render)?;
            rep.iteration = it;
            rep.peak_memory_estimate = peak;
            rep.wall_time = start.elapsed().as_secs_f64();
            log::info!(
                "iteration {it}: psnr {:.3} ssim {:.4} gaussians {}",
                rep.psnr,
                rep.ssim,
                rep.gaussian_count
            );
            timeline.push(rep);
        }
    }
    if let Some(f) = trace_file.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = out_dir {
        write_metrics_csv(&dir.join("metrics.csv"), &timeline)?;
    }
    Ok(TrainOutcome {
        cloud,
        timeline,
        events,
        bounds,
    })
}

pub fn write_metrics_csv(path: &Path, timeline: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in timeline {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointInfo {
    pub iteration: usize,
    pub gaussian_count: usize,
    pub adam_step: u64,
    pub config_hash: String,
    pub cloud_file: String,
    pub optimizer_file: String,
    /// Order and length of the moment arrays in the optimizer file.
    pub moment_layout: Vec<(String, usize)>,
}

/// Writes `iter_NNNNNN.ply` (lossless), the raw Adam moments
/// (`.adam`, little-endian f64, first then second moments per class) and a
/// TOML sidecar describing them under `dir/checkpoints`.
pub fn write_checkpoint(dir: &Path, iteration: usize, cloud: &GaussianCloud, adam: &Adam, cfg: &TrainConfig) -> Result<()> {
    let cdir = dir.join("checkpoints");
    std::fs::create_dir_all(&cdir)?;
    let stem = format!("iter_{iteration:06}");
    save_ply(&cdir.join(format!("{stem}.ply")), cloud, Precision::F64)?;
    let mut bytes = Vec::new();
    let mut layout = Vec::new();
    for (name, m, v) in adam.moments() {
        layout.push((name.to_string(), m.len()));
        for x in m.iter().chain(v) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(cdir.join(format!("{stem}.adam")), bytes)?;
    let info = CheckpointInfo {
        iteration,
        gaussian_count: cloud.len(),
        adam_step: adam.step,
        config_hash: format!("{:016x}", cfg.hash()),
        cloud_file: format!("{stem}.ply"),
        optimizer_file: format!("{stem}.adam"),
        moment_layout: layout,
    };
    let text = toml::to_string(&info).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(cdir.join(format!("{stem}.toml")), text)?;
    Ok(())
}
