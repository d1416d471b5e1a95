//! Command-line front end: dataset synthesis, training, completion,
//! refinement, evaluation and gradient checking.

pub mod colormap;
pub mod config;
pub mod runlog;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use depthdiff::checkpoint::{self, Checkpoint};
use depthdiff::data::manifest::{load_all, write_dataset, Manifest, MANIFEST_FILE};
use depthdiff::data::png::{encode_depth_png, encode_rgb8_png, read_depth_png, read_rgb_png};
use depthdiff::data::synth::synth_scene;
use depthdiff::data::{sparsify, SparsePattern};
use depthdiff::eval::{evaluate, EvalOptions};
use depthdiff::gradsuite::{block_checks, primitive_checks};
use depthdiff::metrics::write_csv;
use depthdiff::train::Trainer;
use depthdiff::{DepthMap, DepthModel, Error, ErrorKind, Result};

use crate::colormap::render_depth_colormap;
use crate::config::RunConfig;
use crate::runlog::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "depthdiff", version, about = "Diffusion-based depth completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.epochs=10`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (images/, sparse/, gt/ and a manifest).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        count: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// `uniform:<p>` or `scanlines:<n>`.
        #[arg(long, default_value = "uniform:0.05")]
        pattern: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a dataset manifest; writes one checkpoint per epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Complete one sparse depth map.
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the refinement stage.
        #[arg(long)]
        no_refine: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Refine an existing dense estimate against a sparse map.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a dataset; writes metrics.csv.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Also write a colormapped preview per sample.
        #[arg(long)]
        previews: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Include every composite network block, not just the primitives.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = depthdiff::gradsuite::DEFAULT_TOLERANCE)]
        tol: f64,
    },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

/// One JSON line for machines, then the human-readable message.
pub fn report_error(e: &Error) -> String {
    let kind = match e.kind() {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
    };
    let line = serde_json::json!({ "error": kind, "exit": exit_code(e), "message": e.to_string() });
    format!("{line}\ndepthdiff: {e}")
}

fn parse_pattern(s: &str) -> Result<SparsePattern> {
    let bad = || Error::Usage(format!("pattern {s:?}: expected uniform:<p> or scanlines:<n>"));
    let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
    let p = match kind {
        "uniform" => SparsePattern::Uniform { p: arg.parse().map_err(|_| bad())? },
        "scanlines" => SparsePattern::Scanlines { n: arg.parse().map_err(|_| bad())? },
        _ => return Err(bad()),
    };
    p.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(p)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_checkpoint(path: &Path, run: &mut RunManifest) -> Result<Checkpoint> {
    run.input(path)?;
    checkpoint::load(path)
}

fn preview(model: &DepthModel, d: &DepthMap) -> Result<Vec<u8>> {
    let rgb = render_depth_colormap(d, (0.0, model.config.d_max))?;
    encode_rgb8_png(d.height(), d.width(), &rgb)
}

/// Depth PNG and preview PNG for one completed map.
fn emit_depth(run: &mut RunManifest, dir: &Path, stem: &str, model: &DepthModel, d: &DepthMap) -> Result<()> {
    let (bytes, report) = encode_depth_png(d)?;
    if report.any() {
        eprintln!("warning: {stem}: {} pixels clamped to the 16-bit range", report.clamped_high + report.clamped_low);
    }
    run.emit(&dir.join(format!("{stem}.png")), &bytes)?;
    run.emit(&dir.join(format!("{stem}_preview.png")), &preview(model, d)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { seed, count, size, pattern, out } => {
            let pattern = parse_pattern(&pattern)?;
            if size < 32 || size % 8 != 0 {
                return Err(Error::Usage(format!("size {size} must be >= 32 and a multiple of 8")));
            }
            let cfg = serde_json::json!({ "seed": seed, "count": count, "size": size, "pattern": pattern });
            let mut run = RunManifest::new("synth", &cfg)?;
            ensure_dir(&out)?;
            let samples = (0..count as u64)
                .map(|i| {
                    let scene_seed = depthdiff::rng::derive_seed(seed, &[i]);
                    let mut s = synth_scene(scene_seed, size, size)?;
                    s.id = format!("{i:05}");
                    s.sparse = sparsify(&s.dense_gt, pattern, scene_seed)?;
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?;
            let clamped = write_dataset(&out, &samples)?;
            if clamped > 0 {
                eprintln!("warning: {clamped} depth pixels clamped while encoding");
            }
            let manifest = Manifest::load(&out.join(MANIFEST_FILE))?;
            for e in &manifest.entries {
                for p in [&e.image, &e.sparse, &e.gt] {
                    run.record_output(p)?;
                }
            }
            run.record_output(&out.join(MANIFEST_FILE))?;
            run.write(&out)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train { data, seed, common } => {
            let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let mut run = RunManifest::new("train", &cfg)?;
            let manifest = Manifest::load(&data)?;
            run.input(&data)?;
            for e in &manifest.entries {
                for p in [&e.image, &e.sparse, &e.gt] {
                    run.input(p)?;
                }
            }
            let samples = load_all(&manifest)?;
            ensure_dir(&common.out)?;
            let model = DepthModel::new(&cfg.model, cfg.train.seed)?;
            let mut trainer = Trainer::new(model, &cfg.train, &samples)?;
            let mut log = String::from("epoch,step,lr,l_diff,l_map,total\n");
            let mut epochs = String::from("epoch,steps,mean_l_diff,mean_l_map\n");
            for _ in 0..cfg.train.epochs {
                let (summary, records) = trainer.run_epoch()?;
                for r in &records {
                    let l_map = r.l_map.map(|v| v.to_string()).unwrap_or_default();
                    log.push_str(&format!("{},{},{},{},{l_map},{}\n", r.epoch, r.step, r.lr, r.l_diff, r.total));
                }
                let m = summary.mean_l_map.map(|v| v.to_string()).unwrap_or_default();
                epochs.push_str(&format!("{},{},{},{m}\n", summary.epoch, summary.steps, summary.mean_l_diff));
                println!("epoch {} mean_l_diff {:.6} mean_l_map {m}", summary.epoch, summary.mean_l_diff);
                let ckpt = Checkpoint {
                    model: trainer.model.clone(),
                    train: Some(cfg.train.clone()),
                    epoch: trainer.epoch,
                    step: trainer.step,
                    seed: cfg.train.seed,
                };
                let mut bytes = Vec::new();
                checkpoint::write_checkpoint(&mut bytes, &ckpt)?;
                run.emit(&common.out.join(format!("epoch_{:03}.ckpt", trainer.epoch)), &bytes)?;
                if trainer.epoch == cfg.train.epochs {
                    run.emit(&common.out.join("model.ckpt"), &bytes)?;
                }
            }
            run.emit(&common.out.join("steps.csv"), log.as_bytes())?;
            run.emit(&common.out.join("epochs.csv"), epochs.as_bytes())?;
            run.write(&common.out)?;
        }
        Command::Complete { ckpt, image, sparse, steps, seed, no_refine, common } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
            let opts = EvalOptions { steps, eta: cfg.eval.eta, seed, refine: !no_refine };
            let mut run = RunManifest::new("complete", &opts)?;
            let model = load_checkpoint(&ckpt, &mut run)?.model;
            run.input(&image)?;
            run.input(&sparse)?;
            let (img, sp) = (read_rgb_png(&image)?, read_depth_png(&sparse)?);
            ensure_dir(&common.out)?;
            let d = model.complete(&img, &sp, steps, opts.eta, seed, opts.refine)?;
            emit_depth(&mut run, &common.out, "depth", &model, &d)?;
            run.write(&common.out)?;
        }
        Command::Refine { ckpt, image, sparse, estimate, common } => {
            RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
            let mut run = RunManifest::new("refine", &serde_json::Value::Null)?;
            let model = load_checkpoint(&ckpt, &mut run)?.model;
            for p in [&image, &sparse, &estimate] {
                run.input(p)?;
            }
            let (img, sp, est) = (read_rgb_png(&image)?, read_depth_png(&sparse)?, read_depth_png(&estimate)?);
            if est.n_valid() != est.meters().len() {
                return Err(Error::Data(format!("estimate {} must be dense", estimate.display())));
            }
            ensure_dir(&common.out)?;
            let d = model.refine_only(&img, &sp, &est)?;
            emit_depth(&mut run, &common.out, "refined", &model, &d)?;
            run.write(&common.out)?;
        }
        Command::Evaluate { ckpt, data, steps, previews, common } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
            let opts = EvalOptions { steps: steps.unwrap_or(cfg.eval.steps), ..cfg.eval };
            let mut run = RunManifest::new("evaluate", &opts)?;
            let model = load_checkpoint(&ckpt, &mut run)?.model;
            let manifest = Manifest::load(&data)?;
            run.input(&data)?;
            let samples = load_all(&manifest)?;
            ensure_dir(&common.out)?;
            let report = evaluate(&model, &samples, &opts)?;
            let mut csv = Vec::new();
            write_csv(&mut csv, &report.rows)?;
            run.emit(&common.out.join("metrics.csv"), &csv)?;
            if previews {
                ensure_dir(&common.out.join("previews"))?;
                for s in &samples {
                    let seed = depthdiff::eval::sample_seed(opts.seed, &s.id);
                    let d = model.complete(&s.image, &s.sparse, opts.steps, opts.eta, seed, opts.refine)?;
                    run.emit(&common.out.join("previews").join(format!("{}.png", s.id)), &preview(&model, &d)?)?;
                }
            }
            run.write(&common.out)?;
            let m = report.mean;
            println!(
                "rmse_mm {:.3} mae_mm {:.3} irmse_per_km {:.3} imae_per_km {:.3} n_valid {}",
                m.rmse_mm, m.mae_mm, m.irmse_per_km, m.imae_per_km, m.n_valid
            );
        }
        Command::Gradcheck { all, seeds, tol } => {
            if seeds == 0 || !(tol > 0.0) {
                return Err(Error::Usage("gradcheck needs seeds >= 1 and tol > 0".into()));
            }
            println!("{:<6} {:<40} {:>12} {:>12} status", "seed", "op", "max_rel", "max_abs");
            let mut failed = 0;
            let mut total = 0;
            for s in 0..seeds {
                let mut reports = primitive_checks(s, tol);
                if all {
                    reports.extend(block_checks(s, tol));
                }
                for r in reports {
                    total += 1;
                    failed += usize::from(!r.passed);
                    let status = if r.passed { "pass" } else { "FAIL" };
                    println!("{s:<6} {:<40} {:>12.3e} {:>12.3e} {status}", r.op_name, r.max_rel_error, r.max_abs_error);
                }
            }
            println!("{} of {total} checks passed", total - failed);
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} of {total} gradient checks failed")));
            }
        }
    }
    Ok(())
}
