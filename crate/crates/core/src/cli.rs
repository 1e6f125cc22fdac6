//! Command-line interface: synth, prep, train, eval, show-windows, plot-log.
//!
//! Exit codes: 0 on success (all declared artifacts written), 1 on runtime
//! failure (diagnostic on stderr), 2 on usage errors.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::config::AppConfig;
use crate::data::{load_manifest, make_synthetic, split_records, write_manifest, DatasetManifest};
use crate::dwm::propose_windows;
use crate::engine::{self, load_checkpoint, LogRecord};
use crate::error::{Error, Result};
use crate::imaging::{load_image, resize_bilinear, save_image};
use crate::network::{backbone_forward, ModelConfig};
use crate::viz;

#[derive(Debug)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(name = "fundus-dwm", version, about = "Three-branch fundus classifier with dynamic window proposals")]
struct Cli {
    /// TOML configuration file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override for all randomized steps.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset plus its manifest.
    Synth {
        /// Output directory for images and manifest.csv.
        #[arg(long)]
        out: PathBuf,
        /// Number of images (balanced across the two classes).
        #[arg(long)]
        n: usize,
        /// Square image side in pixels.
        #[arg(long)]
        side: Option<usize>,
    },
    /// Apply the ROI-crop + CLAHE pipeline over a manifest, writing the
    /// preprocessed crops and a new manifest.
    Prep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a manifest (split into train/val/test internally).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Run directory for logs, snapshots, checkpoints, and split manifests.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override max training epochs.
        #[arg(long)]
        epochs: Option<u64>,
        /// Hard iteration cap.
        #[arg(long)]
        max_iterations: Option<u64>,
        /// Override batch size.
        #[arg(long)]
        batch: Option<usize>,
        /// Rebuild the model section for this input side.
        #[arg(long)]
        input_side: Option<usize>,
    },
    /// Evaluate a checkpoint: writes report.json and confusion.png.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw window proposals for an image onto a PNG overlay.
    ShowWindows {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a loss-curve PNG from a JSON-lines training log.
    PlotLog {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (including the program name) and executes the command.
pub fn run(argv: Vec<String>) -> CommandResult {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success status.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return CommandResult { exit_code: code, artifacts: Vec::new() };
        }
    };

    match execute(cli) {
        Ok(artifacts) => {
            let missing: Vec<&PathBuf> = artifacts.iter().filter(|p| !p.exists()).collect();
            if missing.is_empty() {
                CommandResult { exit_code: 0, artifacts }
            } else {
                eprintln!("error: declared artifacts missing: {missing:?}");
                CommandResult { exit_code: 1, artifacts }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            CommandResult { exit_code: 1, artifacts: Vec::new() }
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<AppConfig> {
    let mut cfg = match cli_config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<Vec<PathBuf>> {
    let mut cfg = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::Synth { out, n, side } => {
            let side = side.unwrap_or(299);
            let manifest = make_synthetic(&out, n, cfg.train.seed, side)?;
            println!(
                "wrote {} images ({} non-referable / {} referable) under {}",
                manifest.len(),
                manifest.class_counts().0,
                manifest.class_counts().1,
                out.display()
            );
            let mut artifacts: Vec<PathBuf> =
                manifest.records.iter().map(|r| r.image_path.clone()).collect();
            artifacts.push(out.join("manifest.csv"));
            Ok(artifacts)
        }

        Command::Prep { manifest, out } => {
            let data = load_manifest(&manifest)?;
            std::fs::create_dir_all(&out)?;
            let imaging = cfg.imaging;
            let records: Vec<crate::data::SampleRecord> = data
                .records
                .par_iter()
                .map(|r| {
                    let img = load_image(&r.image_path)?;
                    let prepped = engine::roi_clahe(&img, r.roi.as_ref(), &imaging)?;
                    let stem = r
                        .image_path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "image".to_string());
                    let path = out.join(format!("{stem}_roi{}_clahe.png", imaging.roi_side));
                    save_image(&prepped, &path)?;
                    Ok(crate::data::SampleRecord {
                        image_path: path,
                        label: r.label,
                        roi: None,
                    })
                })
                .collect::<Result<_>>()?;
            let prepped = DatasetManifest::new(records)?;
            let manifest_path = out.join("manifest.csv");
            write_manifest(&prepped, &manifest_path)?;
            println!("preprocessed {} images into {}", prepped.len(), out.display());
            let mut artifacts: Vec<PathBuf> =
                prepped.records.iter().map(|r| r.image_path.clone()).collect();
            artifacts.push(manifest_path);
            Ok(artifacts)
        }

        Command::Train { manifest, out, resume, epochs, max_iterations, batch, input_side } => {
            if let Some(side) = input_side {
                cfg.model = ModelConfig::desk_default(side);
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            if let Some(m) = max_iterations {
                cfg.train.max_iterations = Some(m);
            }
            if let Some(b) = batch {
                cfg.train.batch_size = b;
            }

            let data = load_manifest(&manifest)?;
            let (train_set, val_set, test_set) =
                split_records(&data, cfg.data.split, cfg.train.seed)?;
            std::fs::create_dir_all(&out)?;
            let split_paths = [
                (out.join("train.csv"), &train_set),
                (out.join("val.csv"), &val_set),
                (out.join("test.csv"), &test_set),
            ];
            for (path, set) in &split_paths {
                write_manifest(set, path)?;
            }

            let resume_ckpt = resume.as_deref().map(load_checkpoint).transpose()?;
            let outcome = engine::train(&cfg, &train_set, Some(&val_set), &out, resume_ckpt)?;
            println!(
                "trained {} epochs / {} iterations (last-epoch accuracy {:.3}); checkpoint: {}",
                outcome.epochs_completed,
                outcome.iterations,
                outcome.train_accuracy,
                outcome.final_checkpoint.display()
            );
            let mut artifacts = outcome.artifacts;
            artifacts.extend(split_paths.into_iter().map(|(p, _)| p));
            Ok(artifacts)
        }

        Command::Eval { manifest, checkpoint, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = load_manifest(&manifest)?;
            let report = engine::evaluate(&ckpt, &data)?;
            std::fs::create_dir_all(&out)?;
            let report_path = out.join("report.json");
            std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            let heat_path = out.join("confusion.png");
            save_image(&viz::confusion_heatmap(&report), &heat_path)?;
            println!(
                "ap {} auc {} acc {:.4} f1 {:.4} sen {:.4} spe {:.4}",
                report.ap.map_or("null".into(), |v| format!("{v:.4}")),
                report.auc.map_or("null".into(), |v| format!("{v:.4}")),
                report.acc,
                report.f1,
                report.sen,
                report.spe
            );
            Ok(vec![report_path, heat_path])
        }

        Command::ShowWindows { image, checkpoint, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let model_cfg = &ckpt.config.model;
            let side = model_cfg.backbone.input_side;
            let img = load_image(&image)?;
            let full = resize_bilinear(&img, side, side)?;
            let fm = backbone_forward(&full, &ckpt.params, "global", &model_cfg.backbone)?;
            let proposals =
                propose_windows(&fm, &model_cfg.dwm_scales, (side, side), model_cfg.nms_kernel)?;
            let overlay = viz::draw_proposals(&full, &proposals);
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            save_image(&overlay, &out)?;
            println!("drew {} proposals onto {}", proposals.len(), out.display());
            Ok(vec![out])
        }

        Command::PlotLog { log, out } => {
            let records = read_log(&log)?;
            let plot = viz::plot_loss(&records, 640, 360)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            save_image(&plot, &out)?;
            println!("plotted {} log records to {}", records.len(), out.display());
            Ok(vec![out])
        }
    }
}

/// Parses a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: (i + 1) as u64,
            message: format!("bad log line: {e}"),
        })?;
        records.push(record);
    }
    Ok(records)
}
