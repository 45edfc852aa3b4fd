//! `silora` command line: train, eval, predict, ablate, synth, plot.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data or I/O
//! error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::{build_toy_backbone, BackboneBundle};
use crate::codec::write_file;
use crate::config::RunConfig;
use crate::data::{
    image_from_rgb, load_dataset, mask_to_grey, split_dataset, synth_generate, write_dataset, LoadOptions,
};
use crate::error::{Error, Result};
use crate::report::{ablation_csv, ablation_rows, evaluate, EvalReport};
use crate::trainer::{
    data_order_hash, load_checkpoint, predict_mask, save_checkpoint, write_loss_csv, Checkpoint, Trainer,
};

pub const BUNDLE_FILE: &str = "bundle.silora";
pub const CHECKPOINT_FILE: &str = "checkpoint.silora";
pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_RECORD_FILE: &str = "run.json";

#[derive(Debug, Parser)]
#[command(
    name = "silora",
    version,
    about = "Low-rank adapted single-step segmentation on a frozen latent backbone"
)]
pub struct Cli {
    /// Print a machine-readable JSON result on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train adaptors and write bundle, checkpoint, loss CSV and run record.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict the mask of one image.
    Predict(PredictArgs),
    /// Train and evaluate the four augmentation regimes.
    Ablate(TrainArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Render SVG figures from report CSVs.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root in the standard layout.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Bundle file; defaults to the one next to the checkpoint.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Report JSON whose aggregate is the reference for the relative columns.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "report")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Output mask PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of samples labelled `train`; the rest are `test`.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Boxplot CSVs (`*_boxplot.csv`) or ablation CSVs.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub config: RunConfig,
    pub bundle_path: PathBuf,
    pub bundle_hash: String,
    pub checkpoint_path: PathBuf,
    pub loss_csv_path: PathBuf,
    pub report_path: Option<PathBuf>,
    pub data_order_hash: String,
    pub train_samples: usize,
    pub final_epoch_loss: Option<f64>,
    pub seconds: f64,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_bundle(cfg: &RunConfig) -> Result<BackboneBundle> {
    let mut bundle = match &cfg.backbone.path {
        Some(p) => BackboneBundle::load(p)?,
        None => build_toy_backbone(&cfg.toy_backbone(), cfg.backbone.seed)?,
    };
    bundle.freeze();
    Ok(bundle)
}

fn bundle_next_to(checkpoint: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().unwrap_or_else(|| Path::new(".")).join(BUNDLE_FILE))
}

/// Trains one configuration into `out` and returns its record.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<(RunRecord, Checkpoint, BackboneBundle)> {
    let started = Instant::now();
    let root = cfg.data_root()?;
    let dataset = load_dataset(root, &cfg.data.train_split, cfg.load_options())?;
    if dataset.is_empty() {
        return Err(Error::Data(format!(
            "split {:?} of {} is empty",
            cfg.data.train_split,
            root.display()
        )));
    }
    let bundle = load_bundle(cfg)?;
    let bundle_path = out.join(BUNDLE_FILE);
    bundle.save(&bundle_path)?;

    let every = cfg.train.checkpoint_every;
    let mut trainer = Trainer::new(&bundle, cfg.train.clone())?;
    trainer.run(&dataset, None, |e, t| {
        if every > 0 && e.epoch % every == 0 && e.epoch < cfg.train.epochs {
            save_checkpoint(
                &t.checkpoint(),
                &out.join(format!("checkpoint-epoch{:03}.silora", e.epoch)),
            )?;
        }
        Ok(())
    })?;
    let ckpt = trainer.checkpoint();
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &checkpoint_path)?;
    let epochs = ckpt.epoch_losses(dataset.len());
    let loss_csv_path = out.join(LOSS_FILE);
    write_loss_csv(&loss_csv_path, &epochs)?;

    let order_hash = data_order_hash(&cfg.train, dataset.len());
    let record = RunRecord {
        run_id: format!("seed{}-{}", cfg.train.seed, &ckpt.bundle_hash[..12]),
        seed: cfg.train.seed,
        config: cfg.clone(),
        bundle_path,
        bundle_hash: ckpt.bundle_hash.clone(),
        checkpoint_path,
        loss_csv_path,
        report_path: None,
        data_order_hash: order_hash,
        train_samples: dataset.len(),
        final_epoch_loss: epochs.last().map(|e| e.loss),
        seconds: started.elapsed().as_secs_f64(),
    };
    write_record(&record, out)?;
    Ok((record, ckpt, bundle))
}

fn write_record(record: &RunRecord, out: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(record).expect("record serializes");
    write_file(&out.join(RUN_RECORD_FILE), json.as_bytes())
}

/// Result of one command, printed by [`run`].
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Outcome {
    Train(RunRecord),
    Eval {
        report: PathBuf,
        table: PathBuf,
        boxplot: PathBuf,
        miou: f64,
        f1: f64,
    },
    Predict {
        mask: PathBuf,
        foreground_fraction: f64,
    },
    Ablate {
        table: PathBuf,
        runs: Vec<RunRecord>,
        rows: Vec<crate::report::AblationRow>,
    },
    Synth {
        root: PathBuf,
        train: usize,
        test: usize,
    },
    Plot {
        figures: Vec<PathBuf>,
    },
}

impl Outcome {
    fn human(&self) -> String {
        match self {
            Outcome::Train(r) => format!(
                "trained {} samples in {:.1}s; final epoch loss {}; checkpoint {}",
                r.train_samples,
                r.seconds,
                r.final_epoch_loss.map(|l| format!("{l:.6}")).unwrap_or_default(),
                r.checkpoint_path.display()
            ),
            Outcome::Eval { report, miou, f1, .. } => {
                format!("mIoU {miou:.2}  F1 {f1:.2}  report {}", report.display())
            }
            Outcome::Predict {
                mask,
                foreground_fraction,
            } => {
                format!("foreground fraction {foreground_fraction:.4}  mask {}", mask.display())
            }
            Outcome::Ablate { table, rows, .. } => {
                let mut s = String::new();
                for r in rows {
                    s.push_str(&format!(
                        "mixup {:<3} noise {:<3} F1 {:6.2} ({:6.2})  mIoU {:6.2} ({:6.2})\n",
                        r.mixup, r.latent_noise, r.f1, r.relative_f1, r.miou, r.relative_miou
                    ));
                }
                s.push_str(&format!("table {}", table.display()));
                s
            }
            Outcome::Synth { root, train, test } => {
                format!("wrote {train} train / {test} test samples to {}", root.display())
            }
            Outcome::Plot { figures } => figures
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }
}

pub fn execute(command: &Command) -> Result<Outcome> {
    match command {
        Command::Train(a) => {
            let cfg = load_config(&a.config, a.seed)?;
            Ok(Outcome::Train(train_run(&cfg, &a.out)?.0))
        }
        Command::Eval(a) => {
            let bundle = BackboneBundle::load(&bundle_next_to(&a.checkpoint, a.bundle.as_deref()))?;
            let ckpt = load_checkpoint(&a.checkpoint, &bundle)?;
            let opts = LoadOptions {
                image_size: ckpt.config.image_size,
                tolerate_gray: false,
            };
            let samples = load_dataset(&a.data, &a.split, opts)?;
            if samples.is_empty() {
                return Err(Error::Data(format!(
                    "split {:?} of {} is empty",
                    a.split,
                    a.data.display()
                )));
            }
            let mut report = evaluate(&samples, &bundle, &ckpt.adaptors, &ckpt.config.prompt)?;
            if let Some(b) = &a.baseline {
                report = report.with_baseline(&EvalReport::load_json(b)?, b.display().to_string())?;
            }
            let paths = report.write_all(&a.out, &a.name)?;
            Ok(Outcome::Eval {
                report: paths.json,
                table: paths.table,
                boxplot: paths.boxplot,
                miou: report.aggregate.miou,
                f1: report.aggregate.f1,
            })
        }
        Command::Predict(a) => {
            let bundle = BackboneBundle::load(&bundle_next_to(&a.checkpoint, a.bundle.as_deref()))?;
            let ckpt = load_checkpoint(&a.checkpoint, &bundle)?;
            let rgb = image::open(&a.image)
                .map_err(|e| Error::Data(format!("cannot decode {}: {e}", a.image.display())))?
                .to_rgb8();
            let size = bundle.geometry().image_size as u32;
            if rgb.dimensions() != (size, size) {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, the bundle expects {size}x{size}",
                    a.image.display(),
                    rgb.width(),
                    rgb.height()
                )));
            }
            let mask = predict_mask(&image_from_rgb(&rgb), &bundle, &ckpt.adaptors, &ckpt.config.prompt)?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            mask_to_grey(&mask)
                .save(&a.out)
                .map_err(|e| Error::Data(format!("cannot write {}: {e}", a.out.display())))?;
            Ok(Outcome::Predict {
                mask: a.out.clone(),
                foreground_fraction: mask.foreground_fraction(),
            })
        }
        Command::Ablate(a) => ablate(&load_config(&a.config, a.seed)?, &a.out),
        Command::Synth(a) => {
            let samples = synth_generate(a.n, a.size, a.seed)?;
            let (train, test) = split_dataset(samples, (a.train_fraction, 1.0 - a.train_fraction), a.seed)?;
            let splits: Vec<&str> = std::iter::repeat_n("train", train.len())
                .chain(std::iter::repeat_n("test", test.len()))
                .collect();
            let (nt, ne) = (train.len(), test.len());
            let all: Vec<_> = train.into_iter().chain(test).collect();
            write_dataset(&a.out, &all, &splits)?;
            Ok(Outcome::Synth {
                root: a.out.clone(),
                train: nt,
                test: ne,
            })
        }
        Command::Plot(a) => {
            let mut figures = Vec::new();
            for r in &a.reports {
                let header = std::fs::read_to_string(r)
                    .map_err(|e| Error::io(r, e))?
                    .lines()
                    .next()
                    .unwrap_or_default()
                    .to_string();
                if header.starts_with("group,metric") {
                    figures.extend(crate::plot::render_boxplots(r, &a.out)?);
                } else if header.starts_with("mixup,latent_noise") {
                    figures.push(crate::plot::render_ablation(r, &a.out)?);
                } else {
                    return Err(Error::format(r, "neither a boxplot nor an ablation CSV"));
                }
            }
            Ok(Outcome::Plot { figures })
        }
    }
}

/// Regimes in table order: (mixup, latent noise).
pub const REGIMES: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

fn regime_dir(mixup: bool, noise: bool) -> String {
    let yn = |b: bool| if b { "yes" } else { "no" };
    format!("mixup-{}_noise-{}", yn(mixup), yn(noise))
}

/// Trains and evaluates every regime with the same seed and data.
pub fn ablate(base: &RunConfig, out: &Path) -> Result<Outcome> {
    let root = base.data_root()?;
    let test = load_dataset(root, &base.data.test_split, base.load_options())?;
    if test.is_empty() {
        return Err(Error::Data(format!(
            "split {:?} of {} is empty",
            base.data.test_split,
            root.display()
        )));
    }
    let mut entries = Vec::new();
    let mut runs = Vec::new();
    for (mixup, noise) in REGIMES {
        let dir = out.join(regime_dir(mixup, noise));
        let cfg = base.with_policy(mixup, noise);
        let (mut record, ckpt, bundle) = train_run(&cfg, &dir)?;
        let report = evaluate(&test, &bundle, &ckpt.adaptors, &cfg.train.prompt)?;
        let paths = report.write_all(&dir, "report")?;
        record.report_path = Some(paths.json);
        write_record(&record, &dir)?;
        log::info!(
            "regime mixup={mixup} noise={noise}: mIoU {:.2} F1 {:.2}",
            report.aggregate.miou,
            report.aggregate.f1
        );
        entries.push((
            mixup,
            noise,
            report.aggregate.f1,
            report.aggregate.miou,
            record.data_order_hash.clone(),
        ));
        runs.push(record);
    }
    let rows = ablation_rows(&entries)?;
    let table = out.join("ablation.csv");
    write_file(&table, ablation_csv(&rows).as_bytes())?;
    Ok(Outcome::Ablate { table, runs, rows })
}

/// Parses `args`, runs the command, prints the outcome and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(outcome) => {
            if cli.json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&outcome).expect("outcome serializes")
                );
            } else {
                println!("{}", outcome.human());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
