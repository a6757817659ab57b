use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lie_core::checkpoint::Checkpoint;
use lie_core::eval::{evaluate_miou, infer, load_student};
use lie_core::intensity_map::{build_intensity_map, MapBuildConfig};
use lie_core::io::{
    generate_dataset, read_points, read_poses, read_sample, read_scan_dir, write_mask, write_tile,
};
use lie_core::model::Variant;
use lie_core::train::{train, RunConfig, TrainConfig};
use lie_core::viz::{render_panels, write_png};

#[derive(Parser)]
#[command(
    name = "lie",
    version,
    about = "LiDAR-only HD map segmentation with intensity-guided distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (DIR/train and DIR/val).
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training samples.
        #[arg(long)]
        num: usize,
        /// Validation samples [default: num / 4].
        #[arg(long)]
        val: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Build a global intensity map from posed scans.
    BuildIntensity {
        /// Directory of point files (or sample directories).
        #[arg(long)]
        scans: PathBuf,
        /// One `x y yaw` line per scan, in file-name order.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        resolution: f64,
        /// Local maximum radius in cells.
        #[arg(long, default_value_t = 1)]
        radius: usize,
        /// Gaussian sigma in cells.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        ground_cell: f64,
        #[arg(long, default_value_t = 0.3)]
        ground_band: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train teacher and student jointly.
    Train(TrainArgs),
    /// Evaluate a checkpoint's student on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path.
        #[arg(long)]
        report: PathBuf,
    },
    /// LiDAR-only inference on one point file; writes a mask raster.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render density, prediction and ground truth of one sample.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per cell.
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
    /// Write a copy of a checkpoint without teacher parameters.
    StripTeacher {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config with `[train]`, `[loss]` and optional `[model]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    /// baseline, ld, ld_dd or full.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    lr_decay_epoch: Option<usize>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

impl TrainArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.preset {
            // A preset flag resets the schedule before the remaining overrides apply.
            let variant = run.train.variant;
            let seed = run.train.seed;
            run.train = TrainConfig {
                variant,
                seed,
                ..TrainConfig::by_name(p)?
            };
        }
        let t = &mut run.train;
        if let Some(v) = &self.variant {
            t.variant = Variant::by_name(v)?;
        }
        macro_rules! set {
            ($($field:ident => $dst:expr),*) => { $(if let Some(v) = self.$field { $dst = v; })* };
        }
        set!(epochs => t.epochs, base_lr => t.base_lr, lr_decay_epoch => t.lr_decay_epoch,
             lr_decay_factor => t.lr_decay_factor, weight_decay => t.weight_decay,
             batch_size => t.batch_size, seed => t.seed, alpha => run.loss.alpha, beta => run.loss.beta);
        run.validate()?;
        Ok(run)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            num,
            val,
            seed,
            preset,
        } => {
            generate_dataset(&out, &preset, num, val.unwrap_or(num / 4), seed)?;
        }
        Command::BuildIntensity {
            scans,
            poses,
            resolution,
            radius,
            sigma,
            ground_cell,
            ground_band,
            out,
        } => {
            let clouds = read_scan_dir(&scans)?;
            let poses = read_poses(&poses)?;
            let cfg = MapBuildConfig {
                resolution,
                ground_cell,
                ground_band,
                local_max_radius: radius,
                gaussian_sigma: sigma,
            };
            let map = build_intensity_map(&clouds, &poses, &cfg)?;
            write_tile(&out, &map)?;
            log::info!(
                "wrote {}×{} intensity map to {}",
                map.grid.cols,
                map.grid.rows,
                out.display()
            );
        }
        Command::Train(args) => {
            let run = args.run_config()?;
            fs::create_dir_all(&args.out)
                .with_context(|| format!("creating {}", args.out.display()))?;
            fs::write(args.out.join("config.toml"), run.to_toml())?;
            let summary = train(&args.data, &args.out, &run)?;
            let last = summary.history.last().expect("at least one epoch");
            println!(
                "trained {} epochs; final loss {:.4}; best epoch {} (val mIoU {})",
                last.epoch,
                last.loss.total,
                summary.best_epoch,
                summary
                    .best_val
                    .map_or("n/a".into(), |r| format!("{:.4}", r.miou))
            );
        }
        Command::Eval { ckpt, data, report } => {
            let r = evaluate_miou(&ckpt, &data)?;
            if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&report, serde_json::to_string_pretty(&r)?)?;
            for c in &r.classes {
                println!(
                    "{:<10} {}",
                    c.class,
                    c.iou.map_or("n/a".into(), |v| format!("{v:.4}"))
                );
            }
            println!("mIoU       {:.4} over {} samples", r.miou, r.samples);
        }
        Command::Infer { ckpt, points, out } => {
            let (student, store) = load_student(&Checkpoint::read(&ckpt)?)?;
            let cloud = read_points(&points)?;
            let res = infer(&student, &store, &cloud)?;
            write_mask(&out, &res.mask)?;
        }
        Command::Viz {
            ckpt,
            sample,
            out,
            scale,
        } => {
            let (student, store) = load_student(&Checkpoint::read(&ckpt)?)?;
            let s = read_sample(&sample)?;
            let pred = infer(&student, &store, &s.points)?;
            if pred.mask.labels.len() != s.mask.labels.len() {
                bail!("sample grid does not match the checkpoint's model grid");
            }
            write_png(&render_panels(&s.points, &pred.mask, &s.mask, scale)?, &out)?;
        }
        Command::StripTeacher { ckpt, out } => {
            Checkpoint::read(&ckpt)?.strip_teacher().write(&out)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
