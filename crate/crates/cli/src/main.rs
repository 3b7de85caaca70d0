use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use skinseg::harness::experiment::{
    build_report, evaluate_cell, overlay_sample, prepare_dataset, split_folds, train_cell, PreparedCatalog,
};
use skinseg::harness::{
    emit_table, read_metrics_csv, run_experiment, CellRecord, CellStatus, ExperimentConfig, RunManifest, RunOptions,
    Workspace,
};
use skinseg::metrics::AggregationMode;
use skinseg::synthetic::{write_lesion_dataset, LesionDatasetSpec};
use skinseg::zoo::Variant;

/// Skin-lesion segmentation with fully convolutional networks.
#[derive(Parser)]
#[command(name = "skinseg", version)]
struct Cli {
    /// Work directory; every relative path resolves against it.
    #[arg(long, global = true, default_value = ".")]
    work: PathBuf,

    /// Experiment configuration (TOML). Defaults to `<work>/experiment.toml`
    /// when present, built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the challenge layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the effective configuration as TOML.
    Config,
    /// Resize images and masks and write paletted label maps.
    Prepare {
        #[arg(long)]
        root: Option<PathBuf>,
        /// Work directory to prepare into (overrides --work).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the five stratified folds.
    Split {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one (variant, fold) cell.
    Train {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        fold: usize,
    },
    /// Evaluate one cell on its test split and record it in the manifest.
    Evaluate {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        fold: usize,
    },
    /// Emit the comparison table from completed cells or a metrics CSV.
    Report {
        /// CSV with columns model,class[,mode],dice,sensitivity,specificity,mcc.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        mode: Option<AggregationMode>,
    },
    /// Render image / truth / prediction panels for one sample.
    Overlay {
        #[arg(long)]
        sample: String,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        fold: usize,
    },
    /// Run the whole experiment, resuming completed cells.
    Run {
        /// Stop after training this many cells.
        #[arg(long)]
        max_cells: Option<usize>,
    },
}

fn load_config(cli: &Cli, work: &Path) -> Result<ExperimentConfig> {
    let path = match &cli.config {
        Some(p) => Some(p.clone()),
        None => Some(work.join("experiment.toml")).filter(|p| p.is_file()),
    };
    match path {
        Some(p) => Ok(ExperimentConfig::load(&p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn check_cell(cfg: &ExperimentConfig, fold: usize) -> Result<()> {
    if fold >= skinseg::catalog::NUM_FOLDS {
        bail!("fold must be below {}, got {fold}", skinseg::catalog::NUM_FOLDS);
    }
    cfg.validate_values()?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let work = match &cli.command {
        Command::Prepare { out: Some(o), .. } => o.clone(),
        _ => cli.work.clone(),
    };
    let ws = Workspace::new(&work);
    let cfg = load_config(&cli, &work)?;
    match cli.command {
        Command::Synth { out, images, seed } => {
            let spec = LesionDatasetSpec {
                num_images: images,
                seed,
                ..Default::default()
            };
            let table = write_lesion_dataset(&out, &spec)?;
            println!("wrote {images} images; diagnosis table {}", table.display());
        }
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::Prepare { root, .. } => {
            std::fs::create_dir_all(&work).with_context(|| format!("creating {}", work.display()))?;
            let root = root.map_or_else(|| cfg.dataset_root(&work), |r| cfg.resolve(&work, &r));
            let table = match &cfg.diagnosis_table {
                Some(t) => cfg.resolve(&work, t),
                None => root.join("diagnosis.csv"),
            };
            let prepared = prepare_dataset(&ws, &root, &table, cfg.image_size)?;
            println!(
                "prepared {} samples ({} excluded) at {}x{}",
                prepared.samples.len(),
                prepared.excluded.len(),
                cfg.image_size.0,
                cfg.image_size.1
            );
        }
        Command::Split { seed } => {
            let folds = split_folds(&ws, seed.unwrap_or(cfg.fold_seed))?;
            for f in &folds {
                println!(
                    "fold {}: train {}, validation {}, test {}",
                    f.fold_index,
                    f.train_ids.len(),
                    f.validation_ids.len(),
                    f.test_ids.len()
                );
            }
        }
        Command::Train { variant, fold } => {
            check_cell(&cfg, fold)?;
            PreparedCatalog::load(&ws)?;
            let path = train_cell(&cfg, &ws, variant, fold)?;
            println!("checkpoint {}", path.display());
        }
        Command::Evaluate { variant, fold } => {
            check_cell(&cfg, fold)?;
            let start = std::time::Instant::now();
            let rows = evaluate_cell(&cfg, &ws, variant, fold)?;
            let mut manifest = RunManifest::load_or_default(&ws.manifest_path())?;
            let rel = ws.cell_rel(variant, fold);
            manifest.upsert(CellRecord {
                variant,
                fold,
                status: CellStatus::Completed,
                error: None,
                checkpoint: rel.join("best.safetensors"),
                metrics_csv: rel.join("metrics.csv"),
                wall_clock_secs: start.elapsed().as_secs_f64(),
                seed: skinseg::harness::experiment::cell_seed(&cfg, variant, fold),
                config_hash: cfg.cell_hash(),
            });
            manifest.save(&ws.manifest_path())?;
            for r in rows.iter().filter(|r| r.mode == cfg.report.aggregation) {
                match r.metrics {
                    Some(m) => println!(
                        "{:<10} dice {:.4} sensitivity {:.4} specificity {:.4} mcc {:.4}",
                        r.class.short_name(),
                        m.dice,
                        m.sensitivity,
                        m.specificity,
                        m.mcc
                    ),
                    None => println!("{:<10} no test images contain this class", r.class.short_name()),
                }
            }
        }
        Command::Report { metrics, mode } => {
            let mode = mode.unwrap_or(cfg.report.aggregation);
            let (report, dir) = match metrics {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    (read_metrics_csv(&text)?, None)
                }
                None => {
                    let manifest = RunManifest::load_or_default(&ws.manifest_path())?;
                    (build_report(&cfg, &ws, &manifest)?, Some(ws.report_dir()))
                }
            };
            if report.rows.is_empty() {
                bail!("no completed cells to report");
            }
            let table = emit_table(&report, mode)?;
            if let Some(d) = dir {
                table.save(&d)?;
            }
            print!("{}", table.markdown);
        }
        Command::Overlay { sample, variant, fold } => {
            check_cell(&cfg, fold)?;
            let p = overlay_sample(&cfg, &ws, &sample, variant, fold)?;
            println!("{}", p.display());
        }
        Command::Run { max_cells } => {
            let summary = run_experiment(&cfg, &ws, RunOptions { max_cells })?;
            println!(
                "cells: {} trained, {} reused, {} failed",
                summary.trained, summary.skipped, summary.failed
            );
            if !summary.report.rows.is_empty() {
                print!("{}", emit_table(&summary.report, cfg.report.aggregation)?.markdown);
            }
            if !summary.complete {
                eprintln!("experiment matrix is incomplete");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
