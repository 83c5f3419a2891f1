use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use splat_core::densify::Strategy;
use splat_core::experiments::{self, parse_cell, prepare_scene, run_cell};
use splat_core::io::config::{load_config, RunConfig};
use splat_core::io::synthetic::make_synthetic;
use splat_core::io::{write_png, write_scene_dir};
use splat_core::ply::load_ply;
use splat_core::renderer::render_forward;
use splat_core::trainer::evaluate;

#[derive(Parser)]
#[command(name = "splat", version, about = "CPU Gaussian splatting trainer with gradient-driven densification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override a config value, e.g. `train.densify.strategy=full`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        Ok(load_config(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its point cloud, metrics and test renders.
    Train(Common),
    /// Render the test views of a scene from a trained PLY.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ply: PathBuf,
    },
    /// Report PSNR and SSIM of a trained PLY on the test views.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        ply: PathBuf,
    },
    /// Train one model per strategy and threshold.
    SweepThreshold {
        #[command(flatten)]
        common: Common,
        /// Thresholds, combined with every `--strategy`.
        #[arg(long = "tau")]
        taus: Vec<f64>,
        #[arg(long = "strategy")]
        strategies: Vec<Strategy>,
        /// Explicit cell as `strategy@tau`; may be repeated.
        #[arg(long = "cell")]
        cells: Vec<String>,
        /// Train cells concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Train every strategy after discarding a fraction of the initial points.
    SweepDrop {
        #[command(flatten)]
        common: Common,
        #[arg(long = "fraction", default_values_t = [0.0, 0.9, 0.99])]
        fractions: Vec<f64>,
        #[arg(long = "strategy", default_values_t = [Strategy::Vanilla, Strategy::Full])]
        strategies: Vec<Strategy>,
        #[arg(long)]
        parallel: bool,
    },
    /// Train all four strategies on one or more scenes.
    Ablation {
        /// Run configurations, one per scene.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        parallel: bool,
    },
    /// Generate the synthetic scene as a COLMAP-style directory.
    MakeScene(Common),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn render_dir(cfg: &RunConfig, ply: &Path, out: &Path) -> Result<usize> {
    let scene = prepare_scene(cfg)?;
    let cloud = load_ply(ply)?;
    std::fs::create_dir_all(out)?;
    let views = if scene.test.is_empty() { &scene.train } else { &scene.test };
    for v in views {
        let r = render_forward(&cloud, &v.camera, &cfg.train.render)?;
        write_png(&out.join(&v.name), &r.image)?;
    }
    Ok(views.len())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let scene = prepare_scene(&cfg)?;
            let r = run_cell(&scene, &cfg, "train", Some(&c.out))?;
            println!(
                "psnr {:.3} ssim {:.4} gaussians {} time {:.1}s",
                r.report.psnr, r.report.ssim, r.report.gaussian_count, r.report.wall_time
            );
            if let Some(n) = r.mask_count {
                println!("gaussians inside mask {n}");
            }
        }
        Command::Render { common, ply } => {
            let cfg = common.load()?;
            let n = render_dir(&cfg, &ply, &common.out)?;
            println!("rendered {n} views to {}", common.out.display());
        }
        Command::Eval { config, overrides, ply } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let scene = prepare_scene(&cfg)?;
            let cloud = load_ply(&ply)?;
            let views = if scene.test.is_empty() { &scene.train } else { &scene.test };
            let r = evaluate(&cloud, views, &cfg.train.render)?;
            println!("psnr {:.3} ssim {:.4} gaussians {}", r.psnr, r.ssim, r.gaussian_count);
        }
        Command::SweepThreshold {
            common,
            taus,
            strategies,
            cells,
            parallel,
        } => {
            let cfg = common.load()?;
            let mut pairs = cells.iter().map(|c| parse_cell(c)).collect::<splat_core::Result<Vec<_>>>()?;
            let strategies = if strategies.is_empty() { vec![cfg.train.densify.strategy] } else { strategies };
            for &t in &taus {
                pairs.extend(strategies.iter().map(|&s| (s, t)));
            }
            if pairs.is_empty() {
                bail!("no sweep cells: pass --tau and/or --cell");
            }
            let res = experiments::sweep_threshold(&cfg, &pairs, Some(&common.out), parallel)?;
            let rows: Vec<_> = res.into_iter().map(|r| r.0).collect();
            print!("{}", experiments::threshold_markdown(&rows));
        }
        Command::SweepDrop {
            common,
            fractions,
            strategies,
            parallel,
        } => {
            let cfg = common.load()?;
            let res = experiments::sweep_drop(&cfg, &fractions, &strategies, Some(&common.out), parallel)?;
            let rows: Vec<_> = res.into_iter().map(|r| r.0).collect();
            print!("{}", experiments::drop_markdown(&rows));
        }
        Command::Ablation {
            configs,
            out,
            overrides,
            parallel,
        } => {
            let mut scenes = Vec::new();
            for path in &configs {
                let cfg = load_config(Some(path), &overrides).with_context(|| format!("loading {}", path.display()))?;
                let name = path.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned());
                scenes.push((name, cfg));
            }
            let rows = experiments::run_ablation(&scenes, Some(&out), parallel)?;
            print!("{}", experiments::ablation_markdown(&rows));
        }
        Command::MakeScene(c) => {
            let cfg = c.load()?;
            let scene = make_synthetic(&cfg.scene.synthetic, cfg.scene.seed)?;
            write_scene_dir(&c.out, &scene)?;
            println!(
                "wrote {} views and {} points to {}",
                scene.views.len(),
                scene.points.len(),
                c.out.display()
            );
        }
    }
    Ok(())
}
