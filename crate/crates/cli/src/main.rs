use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use lumen_autodiff::gradcheck::{op_suite, GradCheckConfig};
use lumen_core::estimator::{
    evaluate_samples, fit, load_checkpoint, small_loss_gradcheck, LightNet, ModelConfig, Sample, TrainConfig,
};
use lumen_core::harness::{
    evaluate, generate_dataset, load_manifest, render_overlay, run_probe_annotations, stratify, with_workers,
    DatasetConfig, ManifestRecord, ProbeRunOptions, Scheme, Split,
};
use lumen_core::lightmath::LightColor;
use lumen_core::renderer::{read_png, write_png};
use lumen_core::scenegen::{LightGT, SceneConfig};
use lumen_core::{LumenError, Result};

#[derive(Parser)]
#[command(name = "lumen", version, about = "Single-image light direction and color estimation")]
struct Cli {
    /// Worker threads (overrides LUMEN_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with a manifest.
    Gen {
        #[arg(long, default_value_t = 2500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Single-object scenes.
        #[arg(long)]
        sid1: bool,
        /// Samples per pixel (1 or 4).
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Train an estimator on a dataset's train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written after every epoch.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        /// Stop after this many updates.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Smallest model, for smoke runs.
        #[arg(long)]
        tiny: bool,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        #[arg(long, value_parser = ["tilt", "pan", "frontback"])]
        stratify: Option<String>,
        /// Report medians instead of means.
        #[arg(long)]
        median: bool,
    },
    /// Estimate the light in one image.
    Predict {
        image: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Write the image with GT and prediction spheres; needs --gt-pan and --gt-tilt.
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        gt_pan: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        gt_tilt: Option<f64>,
        /// GT light color as r,g,b; white when absent.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        gt_rgb: Option<Vec<f64>>,
        /// Camera tilt used to turn tilt differences into elevations.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        camera_tilt: f64,
    },
    /// Extract probe targets from an annotation file into a manifest.
    Probe {
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Blank both spheres in the written images.
        #[arg(long)]
        mask_spheres: bool,
    },
    /// Finite-difference check of every autodiff op and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// `Ok(false)` reports a completed run whose checks failed.
fn run(cli: Cli) -> Result<bool> {
    let threads = cli.threads;
    match cli.command {
        Command::Gen { n, seed, out, size, sid1, samples } => {
            let cfg = DatasetConfig {
                count: n,
                seed,
                size,
                scene: if sid1 { SceneConfig::sid1() } else { SceneConfig::sid2() },
                samples,
                threads,
                ..DatasetConfig::default()
            };
            let records = generate_dataset(&cfg, &out)?;
            let count = |s| records.iter().filter(|r| r.split == s).count();
            println!(
                "wrote {} images to {} (train {}, val {}, test {})",
                records.len(),
                out.display(),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test)
            );
        }
        Command::Train { data, out, epochs, steps, batch, lr, seed, tiny } => {
            let (records, root) = load_manifest(&data)?;
            let train = with_workers(threads, || load_samples(&root, &records, Split::Train))??;
            let val = with_workers(threads, || load_samples(&root, &records, Split::Val))??;
            if train.is_empty() {
                return Err(LumenError::InvalidArgument("the train split is empty".into()));
            }
            let size = train[0].size;
            let config =
                if tiny { ModelConfig::tiny(size) } else { ModelConfig { input_size: size, ..ModelConfig::default() } };
            let mut model = LightNet::new(config, seed)?;
            let cfg = TrainConfig {
                batch_size: batch,
                lr,
                max_epochs: epochs,
                max_steps: steps,
                seed,
                checkpoint: Some(out.clone()),
                ..TrainConfig::default()
            };
            let log = with_workers(threads, || fit(&mut model, &train, &val, &cfg))??;
            for e in &log.epochs {
                let val = e.val.map_or(String::new(), |m| {
                    format!(
                        " val_loss={:.5} val_direction={:.2} val_color={:.2}",
                        m.loss, m.direction_error, m.color_error
                    )
                });
                println!("epoch={} steps={} lr={:.1e} train_loss={:.5}{val}", e.epoch, e.steps, e.lr, e.train_loss);
            }
            let m = evaluate_samples(&model, &train, &cfg.weights, batch)?;
            println!(
                "train: loss={:.5} direction={:.2} color={:.2}; checkpoint {}",
                m.loss,
                m.direction_error,
                m.color_error,
                out.display()
            );
        }
        Command::Eval { data, model, split, stratify: scheme, median } => {
            let split: Split = split.parse()?;
            let scheme: Option<Scheme> = scheme.map(|s| s.parse()).transpose()?;
            let (net, _) = load_checkpoint(&model)?;
            let (records, root) = load_manifest(&data)?;
            let report = with_workers(threads, || evaluate(&net, &root, &records, split))??;
            print!("{}", report.overall_table(median));
            if let Some(scheme) = scheme {
                println!();
                print!("{}", stratify(&report, scheme).render(median));
            }
        }
        Command::Predict { image, model, overlay, gt_pan, gt_tilt, gt_rgb, camera_tilt } => {
            let (net, _) = load_checkpoint(&model)?;
            let img = read_png(&image)?;
            let p = net.predict(&img)?;
            let c = p.color;
            println!("pan={:.2} tilt={:.2} rgb={:.4},{:.4},{:.4}", p.delta_pan, p.delta_tilt, c.r, c.g, c.b);
            if let Some(path) = overlay {
                let (Some(pan), Some(tilt)) = (gt_pan, gt_tilt) else {
                    return Err(LumenError::InvalidArgument("--overlay needs --gt-pan and --gt-tilt".into()));
                };
                let color = gt_rgb.map_or(LightColor::WHITE, |v| LightColor::new(v[0], v[1], v[2]));
                let gt = LightGT { delta_pan: pan, delta_tilt: tilt, color };
                write_png(&render_overlay(&p, &gt, &img, camera_tilt), &path)?;
            }
        }
        Command::Probe { annotations, out, mask_spheres } => {
            let records = run_probe_annotations(&annotations, &out, ProbeRunOptions { mask_spheres, threads })?;
            for r in &records {
                let p = &r.probe.as_ref().expect("probe records carry their source").result;
                println!(
                    "{} pan={:.2} tilt={:.2} rgb={:.4},{:.4},{:.4} confidence={:.3}",
                    r.image, p.pan, p.tilt, p.color.r, p.color.g, p.color.b, p.confidence
                );
            }
        }
        Command::Gradcheck { seed } => {
            let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };
            let mut reports = with_workers(threads, || op_suite(seed, cfg))??;
            reports.push(small_loss_gradcheck(seed)?);
            for r in &reports {
                println!("{r}");
            }
            return Ok(reports.iter().all(|r| r.passed()));
        }
    }
    Ok(true)
}

fn load_samples(root: &Path, records: &[ManifestRecord], split: Split) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .filter(|r| r.split == split)
        .map(|r| Sample::from_image(&read_png(&root.join(&r.image))?, r.gt))
        .collect()
}
