//! Experiment drivers: threshold sweeps, initialization-drop sweeps and the
//! four-strategy ablation. Every cell trains a fresh model and writes its
//! effective configuration next to its results, so any cell can be re-run on
//! its own with `train`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::densify::Strategy;
use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::io::synthetic::{make_synthetic, MaskSpec};
use crate::io::{load_scene_dir, write_png};
use crate::ply::{load_ply, save_ply, Precision};
use crate::renderer::render_forward;
use crate::scene::{drop_points, init_from_points, PointSet};
use crate::trainer::{every_eighth_split, train, MetricsReport, TrainOutcome, View};

/// Views split for training and evaluation, plus initialization points.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub train: Vec<View>,
    pub test: Vec<View>,
    /// Points before any drop is applied.
    pub points: PointSet,
    pub mask: Option<MaskSpec>,
}

/// Loads or generates the scene described by `cfg.scene`.
pub fn prepare_scene(cfg: &RunConfig) -> Result<PreparedScene> {
    let (views, points, mask) = match &cfg.scene.path {
        Some(dir) => {
            let s = load_scene_dir(dir, cfg.scene.downscale)?;
            (s.views, s.points, s.mask)
        }
        None => {
            let s = make_synthetic(&cfg.scene.synthetic, cfg.scene.seed)?;
            (s.views, s.points, cfg.scene.synthetic.mask.clone())
        }
    };
    if views.is_empty() {
        return Err(Error::invalid("scene has no views"));
    }
    let (train_idx, test_idx) = every_eighth_split(views.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| views[i].clone()).collect::<Vec<_>>();
    let train = if train_idx.is_empty() { pick(&test_idx) } else { pick(&train_idx) };
    Ok(PreparedScene {
        test: if train_idx.is_empty() { Vec::new() } else { pick(&test_idx) },
        train,
        points,
        mask,
    })
}

/// Result of one trained cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub label: String,
    pub config: RunConfig,
    pub report: MetricsReport,
    /// Gaussians inside the scene's sparse-initialization mask, counted from
    /// the exported PLY when an output directory is used.
    pub mask_count: Option<usize>,
    pub outcome: TrainOutcome,
}

/// Trains one configuration on a prepared scene. With `out_dir`, writes
/// `config.toml`, `metrics.csv`, `point_cloud.ply` and test renders there.
pub fn run_cell(scene: &PreparedScene, cfg: &RunConfig, label: &str, out_dir: Option<&Path>) -> Result<CellResult> {
    cfg.validate()?;
    let points = drop_points(&scene.points, cfg.scene.drop_fraction, cfg.scene.drop_seed)?;
    let init = init_from_points(&points, cfg.train.sh_degree)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    let outcome = train(init, &scene.train, &scene.test, &cfg.train, out_dir)?;
    let mut mask_count = scene.mask.as_ref().map(|m| m.count_inside(&outcome.cloud));
    if let Some(dir) = out_dir {
        let ply = dir.join("point_cloud.ply");
        save_ply(&ply, &outcome.cloud, Precision::F32)?;
        if let Some(m) = &scene.mask {
            mask_count = Some(m.count_inside(&load_ply(&ply)?));
        }
        let renders = dir.join("test_renders");
        std::fs::create_dir_all(&renders)?;
        for v in &scene.test {
            let out = render_forward(&outcome.cloud, &v.camera, &cfg.train.render)?;
            write_png(&renders.join(&v.name), &out.image)?;
        }
    }
    Ok(CellResult {
        label: label.to_string(),
        config: cfg.clone(),
        report: *outcome.final_report(),
        mask_count,
        outcome,
    })
}

/// One row of a sweep table. Failed cells keep their coordinates and carry
/// the error message.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub scene: String,
    pub strategy: Strategy,
    pub tau_pos: f64,
    pub drop_fraction: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub gaussian_count: Option<usize>,
    pub peak_memory_bytes: Option<u64>,
    pub wall_time_s: Option<f64>,
    pub mask_count: Option<usize>,
    pub error: Option<String>,
}

/// Coordinates of one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub strategy: Strategy,
    pub tau_pos: f64,
    pub drop_fraction: f64,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}_tau{:e}_drop{}", self.strategy.name(), self.tau_pos, self.drop_fraction)
    }

    fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.train.densify.strategy = self.strategy;
        cfg.train.densify.tau_pos = self.tau_pos;
        cfg.scene.drop_fraction = self.drop_fraction;
        cfg
    }
}

/// Parses `strategy@tau`, e.g. `vanilla@1e-4`.
pub fn parse_cell(s: &str) -> Result<(Strategy, f64)> {
    let (st, tau) = s
        .split_once('@')
        .ok_or_else(|| Error::invalid(format!("cell `{s}` is not strategy@tau")))?;
    let tau: f64 = tau.parse().map_err(|_| Error::invalid(format!("cell `{s}`: bad threshold `{tau}`")))?;
    Ok((st.parse()?, tau))
}

/// Runs every cell against the same prepared scene. Cells run one after the
/// other unless `parallel` is set; a failing cell is reported in its row and
/// the sweep continues.
pub fn run_cells(
    scene: &PreparedScene,
    scene_name: &str,
    base: &RunConfig,
    cells: &[Cell],
    out_dir: Option<&Path>,
    parallel: bool,
) -> Vec<(SweepRow, Option<CellResult>)> {
    let run = |cell: &Cell| {
        let cfg = cell.apply(base);
        let dir: Option<PathBuf> = out_dir.map(|d| d.join("cells").join(format!("{scene_name}_{}", cell.label())));
        let res = run_cell(scene, &cfg, &cell.label(), dir.as_deref());
        let mut row = SweepRow {
            scene: scene_name.to_string(),
            strategy: cell.strategy,
            tau_pos: cell.tau_pos,
            drop_fraction: cell.drop_fraction,
            psnr: None,
            ssim: None,
            gaussian_count: None,
            peak_memory_bytes: None,
            wall_time_s: None,
            mask_count: None,
            error: None,
        };
        match res {
            Ok(r) => {
                row.psnr = Some(r.report.psnr);
                row.ssim = Some(r.report.ssim);
                row.gaussian_count = Some(r.report.gaussian_count);
                row.peak_memory_bytes = Some(r.report.peak_memory_estimate);
                row.wall_time_s = Some(r.report.wall_time);
                row.mask_count = r.mask_count;
                log::info!("{scene_name} {}: psnr {:.3} gaussians {}", cell.label(), r.report.psnr, r.report.gaussian_count);
                (row, Some(r))
            }
            Err(e) => {
                log::warn!("{scene_name} {} failed: {e}", cell.label());
                row.error = Some(e.to_string());
                (row, None)
            }
        }
    };
    if parallel {
        cells.par_iter().map(run).collect()
    } else {
        cells.iter().map(run).collect()
    }
}

pub fn write_rows_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn opt<T: std::fmt::Display>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map_or_else(|| "failed".to_string(), f)
}

/// Markdown table in the layout of a threshold comparison.
pub fn threshold_markdown(rows: &[SweepRow]) -> String {
    let mut s = String::from("| scene | strategy | tau_pos | PSNR | SSIM | Gaussians | memory (MiB) | time (s) |\n|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        writeln!(
            s,
            "| {} | {} | {:e} | {} | {} | {} | {} | {} |",
            r.scene,
            r.strategy,
            r.tau_pos,
            opt(r.psnr, |v| format!("{v:.2}")),
            opt(r.ssim, |v| format!("{v:.4}")),
            opt(r.gaussian_count, |v| v.to_string()),
            opt(r.peak_memory_bytes, |v| format!("{:.1}", v as f64 / (1024.0 * 1024.0))),
            opt(r.wall_time_s, |v| format!("{v:.1}")),
        )
        .unwrap();
    }
    s
}

/// Markdown table of metrics against the drop fraction, one column pair per strategy.
pub fn drop_markdown(rows: &[SweepRow]) -> String {
    let mut strategies: Vec<Strategy> = Vec::new();
    let mut fractions: Vec<f64> = Vec::new();
    for r in rows {
        if !strategies.contains(&r.strategy) {
            strategies.push(r.strategy);
        }
        if !fractions.contains(&r.drop_fraction) {
            fractions.push(r.drop_fraction);
        }
    }
    let mut s = String::from("| drop |");
    for st in &strategies {
        write!(s, " {st} PSNR | {st} SSIM |").unwrap();
    }
    s.push_str("\n|---|");
    s.push_str(&"---|---|".repeat(strategies.len()));
    s.push('\n');
    for f in &fractions {
        write!(s, "| {f} |").unwrap();
        for st in &strategies {
            let r = rows.iter().find(|r| r.strategy == *st && r.drop_fraction == *f);
            let psnr = r.and_then(|r| r.psnr);
            let ssim = r.and_then(|r| r.ssim);
            write!(s, " {} | {} |", opt(psnr, |v| format!("{v:.2}")), opt(ssim, |v| format!("{v:.4}"))).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Markdown table of the ablation: one row per strategy and scene, followed
/// by mean rows when more than one scene is present.
pub fn ablation_markdown(rows: &[SweepRow]) -> String {
    let mut s = String::from("| scene | strategy | PSNR | SSIM |\n|---|---|---|---|\n");
    for r in rows {
        writeln!(
            s,
            "| {} | {} | {} | {} |",
            r.scene,
            r.strategy,
            opt(r.psnr, |v| format!("{v:.2}")),
            opt(r.ssim, |v| format!("{v:.4}"))
        )
        .unwrap();
    }
    s
}

fn validate_taus(taus: &[f64]) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::invalid("threshold sweep needs at least one tau"));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::invalid(format!("threshold {t} must be positive")));
    }
    Ok(())
}

fn write_outputs(out_dir: Option<&Path>, stem: &str, rows: &[SweepRow], md: &str) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_rows_csv(&dir.join(format!("{stem}.csv")), rows)?;
        std::fs::write(dir.join(format!("{stem}.md")), md)?;
    }
    Ok(())
}

/// Trains one model per `(strategy, tau)` pair and tabulates quality, size,
/// memory and time. Writes `threshold_sweep.csv` / `.md` under `out_dir`.
pub fn sweep_threshold(
    base: &RunConfig,
    pairs: &[(Strategy, f64)],
    out_dir: Option<&Path>,
    parallel: bool,
) -> Result<Vec<(SweepRow, Option<CellResult>)>> {
    validate_taus(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    let scene = prepare_scene(base)?;
    let cells: Vec<Cell> = pairs
        .iter()
        .map(|&(strategy, tau_pos)| Cell {
            strategy,
            tau_pos,
            drop_fraction: base.scene.drop_fraction,
        })
        .collect();
    let res = run_cells(&scene, "scene", base, &cells, out_dir, parallel);
    let rows: Vec<SweepRow> = res.iter().map(|r| r.0.clone()).collect();
    write_outputs(out_dir, "threshold_sweep", &rows, &threshold_markdown(&rows))?;
    Ok(res)
}

/// Trains one model per `(fraction, strategy)` after discarding that fraction
/// of the initialization points. Writes `drop_sweep.csv` / `.md`.
pub fn sweep_drop(
    base: &RunConfig,
    fractions: &[f64],
    strategies: &[Strategy],
    out_dir: Option<&Path>,
    parallel: bool,
) -> Result<Vec<(SweepRow, Option<CellResult>)>> {
    if fractions.is_empty() || strategies.is_empty() {
        return Err(Error::invalid("drop sweep needs at least one fraction and one strategy"));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::invalid(format!("drop fraction {f} outside [0, 1)")));
    }
    let scene = prepare_scene(base)?;
    let cells: Vec<Cell> = fractions
        .iter()
        .flat_map(|&drop_fraction| {
            strategies.iter().map(move |&strategy| Cell {
                strategy,
                tau_pos: base.train.densify.tau_pos,
                drop_fraction,
            })
        })
        .collect();
    let res = run_cells(&scene, "scene", base, &cells, out_dir, parallel);
    let rows: Vec<SweepRow> = res.iter().map(|r| r.0.clone()).collect();
    write_outputs(out_dir, "drop_sweep", &rows, &drop_markdown(&rows))?;
    Ok(res)
}

/// Trains all four strategies on every scene. With several scenes, appends
/// one mean row per strategy (scene `mean`). Writes `ablation.csv` / `.md`.
pub fn run_ablation(scenes: &[(String, RunConfig)], out_dir: Option<&Path>, parallel: bool) -> Result<Vec<SweepRow>> {
    if scenes.is_empty() {
        return Err(Error::invalid("ablation needs at least one scene"));
    }
    let mut rows = Vec::new();
    for (name, base) in scenes {
        let scene = prepare_scene(base)?;
        let cells: Vec<Cell> = Strategy::ALL
            .iter()
            .map(|&strategy| Cell {
                strategy,
                tau_pos: base.train.densify.tau_pos,
                drop_fraction: base.scene.drop_fraction,
            })
            .collect();
        rows.extend(run_cells(&scene, name, base, &cells, out_dir, parallel).into_iter().map(|r| r.0));
    }
    if scenes.len() > 1 {
        for st in Strategy::ALL {
            let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.strategy == st && r.error.is_none()).collect();
            let n = ok.len() as f64;
            let mean = |f: &dyn Fn(&SweepRow) -> f64| (!ok.is_empty()).then(|| ok.iter().map(|r| f(r)).sum::<f64>() / n);
            rows.push(SweepRow {
                scene: "mean".into(),
                strategy: st,
                tau_pos: f64::NAN,
                drop_fraction: f64::NAN,
                psnr: mean(&|r| r.psnr.unwrap_or(f64::NAN)),
                ssim: mean(&|r| r.ssim.unwrap_or(f64::NAN)),
                gaussian_count: None,
                peak_memory_bytes: None,
                wall_time_s: None,
                mask_count: None,
                error: None,
            });
        }
    }
    write_outputs(out_dir, "ablation", &rows, &ablation_markdown(&rows))?;
    Ok(rows)
}
