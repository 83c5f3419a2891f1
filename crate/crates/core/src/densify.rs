//! Adaptive density control: growth statistics, growth decisions, and the
//! split / clone / prune mechanics.
//!
//! Every strategy reduces to one statistic per Gaussian,
//! `sum_k w_k f_k |g_k| / sum_k w_k`, compared strictly against `tau_pos`.
//! The weight `w_k` is the pixel count in view `k` for the pixel-aware
//! strategies and 1 otherwise; the factor `f_k` is the depth scaling for the
//! scaled strategies and 1 otherwise. The depth factor never enters the
//! denominator.

use std::io::Write;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsmath::{logit, normalize_quat, quat_to_matrix};
use crate::renderer::RenderOutput;
use crate::scene::{GaussianCloud, SceneBounds};

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
pub const SPLIT_CHILDREN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Vanilla,
    PixelAware,
    ScaledOnly,
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Vanilla, Strategy::PixelAware, Strategy::ScaledOnly, Strategy::Full];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::PixelAware => "pixel-aware",
            Strategy::ScaledOnly => "scaled-only",
            Strategy::Full => "full",
        }
    }

    pub fn pixel_weighted(self) -> bool {
        matches!(self, Strategy::PixelAware | Strategy::Full)
    }

    pub fn depth_scaled(self) -> bool {
        matches!(self, Strategy::ScaledOnly | Strategy::Full)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}` (expected vanilla, pixel-aware, scaled-only or full)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub strategy: Strategy,
    pub tau_pos: f64,
    pub gamma_depth: f64,
    /// Iterations between densification events.
    pub interval: usize,
    /// Events happen at iterations strictly after `start_iter`...
    pub start_iter: usize,
    /// ...and up to and including `stop_iter`.
    pub stop_iter: usize,
    /// Fraction of the scene extent separating splits from clones.
    pub percent_dense: f64,
    pub opacity_prune_threshold: f64,
    /// Screen-radius prune limit in pixels, active after the first opacity
    /// reset; `0` disables it.
    pub max_screen_radius_prune: f64,
    /// Iterations between opacity resets; `0` disables them.
    pub opacity_reset_interval: usize,
    /// Opacity that resets clamp down to.
    pub opacity_reset_value: f64,
    /// Also multiply the positional gradients fed to the optimizer by the
    /// depth factor (scaled strategies only).
    pub scale_optimizer_gradients: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            strategy: Strategy::Vanilla,
            tau_pos: 0.0002,
            gamma_depth: 0.37,
            interval: 100,
            start_iter: 500,
            stop_iter: 15_000,
            percent_dense: 0.01,
            opacity_prune_threshold: 0.005,
            max_screen_radius_prune: 20.0,
            opacity_reset_interval: 3000,
            opacity_reset_value: 0.01,
            scale_optimizer_gradients: false,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_pos > 0.0) {
            return Err(Error::Config(format!("densify.tau_pos must be > 0, got {}", self.tau_pos)));
        }
        if !(self.gamma_depth > 0.0) {
            return Err(Error::Config(format!("densify.gamma_depth must be > 0, got {}", self.gamma_depth)));
        }
        if self.interval == 0 {
            return Err(Error::Config("densify.interval must be >= 1".into()));
        }
        if !(self.percent_dense >= 0.0) {
            return Err(Error::Config("densify.percent_dense must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.opacity_reset_value) || self.opacity_reset_value == 0.0 {
            return Err(Error::Config("densify.opacity_reset_value must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Whether a densification event fires after 1-based `iteration`.
    pub fn is_event(&self, iteration: usize) -> bool {
        iteration > self.start_iter && iteration <= self.stop_iter && iteration % self.interval == 0
    }
}

/// `clip((depth / (gamma * radius))^2, 0, 1)`; always 1 for degenerate bounds.
pub fn gradient_scale_factor(depth: f64, bounds: &SceneBounds, gamma_depth: f64) -> f64 {
    if bounds.is_degenerate() {
        return 1.0;
    }
    let r = depth / (gamma_depth * bounds.radius);
    (r * r).clamp(0.0, 1.0)
}

/// Running growth statistics over one densification window.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyAccumulator {
    pub weighted_grad_sum: Vec<f64>,
    pub weight_sum: Vec<f64>,
    pub view_count: Vec<u32>,
    /// Largest screen radius seen in the window, for pruning.
    pub max_screen_radius: Vec<f64>,
}

impl DensifyAccumulator {
    pub fn new(n: usize) -> Self {
        DensifyAccumulator {
            weighted_grad_sum: vec![0.0; n],
            weight_sum: vec![0.0; n],
            view_count: vec![0; n],
            max_screen_radius: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.view_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view_count.is_empty()
    }

    pub fn reset(&mut self, n: usize) {
        *self = DensifyAccumulator::new(n);
    }

    /// Adds one view's observation of Gaussian `i`.
    pub fn add(&mut self, i: usize, pixel_count: u32, grad_norm: f64, depth: f64, cfg: &DensifyConfig, bounds: &SceneBounds) {
        let w = if cfg.strategy.pixel_weighted() { pixel_count as f64 } else { 1.0 };
        let f = if cfg.strategy.depth_scaled() {
            gradient_scale_factor(depth, bounds, cfg.gamma_depth)
        } else {
            1.0
        };
        self.weighted_grad_sum[i] += w * f * grad_norm;
        self.weight_sum[i] += w;
        self.view_count[i] += 1;
    }

    /// Folds in every Gaussian that participated in `out`, using `depths`
    /// (camera-space z per Gaussian) for the depth factor.
    pub fn accumulate_view(&mut self, out: &RenderOutput, depths: &[f64], cfg: &DensifyConfig, bounds: &SceneBounds) -> Result<()> {
        let n = self.len();
        if out.per_gaussian_view_flag.len() != n || depths.len() != n {
            return Err(Error::invalid(format!(
                "accumulator holds {n} gaussians but the view reports {} (depths {})",
                out.per_gaussian_view_flag.len(),
                depths.len()
            )));
        }
        for i in 0..n {
            if !out.per_gaussian_view_flag[i] {
                continue;
            }
            let [gx, gy] = out.per_gaussian_ndc_grad[i];
            self.add(i, out.per_gaussian_pixel_count[i], (gx * gx + gy * gy).sqrt(), depths[i], cfg, bounds);
            self.max_screen_radius[i] = self.max_screen_radius[i].max(out.per_gaussian_radius[i]);
        }
        Ok(())
    }

    /// Mean growth statistic, `None` where nothing was accumulated.
    pub fn statistic(&self, i: usize) -> Option<f64> {
        (self.weight_sum[i] > 0.0).then(|| self.weighted_grad_sum[i] / self.weight_sum[i])
    }
}

/// `statistic > tau_pos`, strictly; Gaussians with zero weight never grow.
pub fn growth_decisions(acc: &DensifyAccumulator, cfg: &DensifyConfig) -> Vec<bool> {
    (0..acc.len()).map(|i| acc.statistic(i).is_some_and(|s| s > cfg.tau_pos)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    None,
    Clone,
    Split,
    Prune,
}

/// Index map produced by a structural edit: entry `j` of the new cloud came
/// from old Gaussian `Some(i)`, or is newly created (`None`).
pub type Sources = Vec<Option<usize>>;

fn gather(cloud: &GaussianCloud, picks: &[usize]) -> GaussianCloud {
    let mut out = GaussianCloud::empty(cloud.sh_degree);
    for &i in picks {
        out.push(cloud.positions[i], cloud.log_scales[i], cloud.rotations[i], cloud.opacity_logits[i], cloud.sh(i));
    }
    out
}

/// Splits large grown Gaussians into two sampled children and clones small
/// ones. Untouched Gaussians keep their relative order and come first,
/// followed by clones and children in parent order.
pub fn split_or_clone(
    cloud: &GaussianCloud,
    grow_mask: &[bool],
    bounds: &SceneBounds,
    cfg: &DensifyConfig,
    seed: u64,
) -> Result<(GaussianCloud, Sources, Vec<Action>)> {
    if grow_mask.len() != cloud.len() {
        return Err(Error::invalid(format!("grow mask has {} entries for {} gaussians", grow_mask.len(), cloud.len())));
    }
    let limit = cfg.percent_dense * bounds.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actions = vec![Action::None; cloud.len()];
    let mut keep = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        if grow_mask[i] {
            actions[i] = if cloud.max_scale(i) > limit { Action::Split } else { Action::Clone };
        }
        if actions[i] != Action::Split {
            keep.push(i);
        }
    }
    let mut out = gather(cloud, &keep);
    let mut sources: Sources = keep.iter().map(|&i| Some(i)).collect();
    for i in 0..cloud.len() {
        match actions[i] {
            Action::Clone => {
                out.push(cloud.positions[i], cloud.log_scales[i], cloud.rotations[i], cloud.opacity_logits[i], cloud.sh(i));
                sources.push(None);
            }
            Action::Split => {
                let scale = cloud.log_scales[i].map(f64::exp);
                let rot = quat_to_matrix(normalize_quat(cloud.rotations[i])?);
                let child_log_scale = cloud.log_scales[i].map(|v| v - SPLIT_SCALE_DIVISOR.ln());
                for _ in 0..SPLIT_CHILDREN {
                    let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                    let offset: Vector3<f64> = rot * scale.component_mul(&z);
                    out.push(cloud.positions[i] + offset, child_log_scale, cloud.rotations[i], cloud.opacity_logits[i], cloud.sh(i));
                    sources.push(None);
                }
            }
            _ => {}
        }
    }
    Ok((out, sources, actions))
}

/// Keep mask of the prune rule: opacity at or above the threshold, and screen
/// radius within the limit when `screen_radius` is supplied.
pub fn prune_mask(cloud: &GaussianCloud, cfg: &DensifyConfig, screen_radius: Option<&[f64]>) -> Vec<bool> {
    (0..cloud.len())
        .map(|i| {
            let too_big = match screen_radius {
                Some(r) if cfg.max_screen_radius_prune > 0.0 => r[i] > cfg.max_screen_radius_prune,
                _ => false,
            };
            !(cloud.opacity(i) < cfg.opacity_prune_threshold || too_big)
        })
        .collect()
}

/// Removes low-opacity and oversized Gaussians; returns the surviving indices.
pub fn prune(cloud: &mut GaussianCloud, cfg: &DensifyConfig, screen_radius: Option<&[f64]>) -> Vec<usize> {
    let keep = prune_mask(cloud, cfg, screen_radius);
    cloud.retain_mask(&keep);
    keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

/// Caps every opacity at `value`.
pub fn reset_opacity(cloud: &mut GaussianCloud, value: f64) {
    let cap = logit(value);
    for l in &mut cloud.opacity_logits {
        *l = l.min(cap);
    }
}

/// One row of the densification trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub gaussian_id: usize,
    pub view_count: u32,
    pub weight_sum: f64,
    pub weighted_grad_sum: f64,
    pub decision: bool,
    pub action: Action,
}

/// Outcome of a full densification event.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyEvent {
    pub iteration: usize,
    pub grown: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub sources: Sources,
    pub trace: Vec<TraceRow>,
}

/// Growth decisions, split/clone, then pruning. `prune_screen` enables the
/// screen-radius rule. The accumulator is reset for the new cloud.
pub fn densify_event(
    cloud: &mut GaussianCloud,
    acc: &mut DensifyAccumulator,
    bounds: &SceneBounds,
    cfg: &DensifyConfig,
    iteration: usize,
    seed: u64,
    prune_screen: bool,
    want_trace: bool,
) -> Result<DensifyEvent> {
    let grow = growth_decisions(acc, cfg);
    let (grown_cloud, sources, mut actions) = split_or_clone(cloud, &grow, bounds, cfg, seed)?;
    let cloned = actions.iter().filter(|a| **a == Action::Clone).count();
    let split = actions.iter().filter(|a| **a == Action::Split).count();
    let radii: Vec<f64> = sources.iter().map(|s| s.map_or(0.0, |i| acc.max_screen_radius[i])).collect();
    let mut next = grown_cloud;
    let keep = prune_mask(&next, cfg, prune_screen.then_some(radii.as_slice()));
    next.retain_mask(&keep);
    let mut final_sources = Vec::with_capacity(next.len());
    for (j, src) in sources.iter().enumerate() {
        if keep[j] {
            final_sources.push(*src);
        } else if let Some(i) = src {
            actions[*i] = Action::Prune;
        }
    }
    let event = DensifyEvent {
        iteration,
        grown: grow.iter().filter(|g| **g).count(),
        cloned,
        split,
        pruned: keep.iter().filter(|k| !**k).count(),
        sources: final_sources,
        trace: if want_trace {
            (0..cloud.len())
                .map(|i| TraceRow {
                    iteration,
                    gaussian_id: i,
                    view_count: acc.view_count[i],
                    weight_sum: acc.weight_sum[i],
                    weighted_grad_sum: acc.weighted_grad_sum[i],
                    decision: grow[i],
                    action: actions[i],
                })
                .collect()
        } else {
            Vec::new()
        },
    };
    *cloud = next;
    acc.reset(cloud.len());
    Ok(event)
}

/// Appends trace rows as CSV; the header is written when `header` is set.
pub fn write_trace<W: Write>(out: W, rows: &[TraceRow], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
