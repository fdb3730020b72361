//! `m3att` — command-line harness around the referring-segmentation model:
//! synthetic dataset generation, deterministic training, checkpoint
//! evaluation, ablation suites, and attention-map dumps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 flag/usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use m3att_core::ablate::{run_suite, Suite};
use m3att_core::ckpt::load_model;
use m3att_core::data::{generate_dataset, load_manifest, load_sample, manifest_path, Split};
use m3att_core::dump::dump_attention;
use m3att_core::kvconfig::KvConfig;
use m3att_core::metrics::{append_ledger, ledger_row};
use m3att_core::model::ModelConfig;
use m3att_core::train::{evaluate_samples, load_split, train, LrSchedule, TrainConfig};
use m3att_core::{Error, Result};

#[derive(Parser)]
#[command(name = "m3att", version, about = "Referring-segmentation harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic referring-grounding dataset.
    GenData {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Square canvas extent in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory (will hold manifest.tsv plus image/mask files).
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a directory that already holds a dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a model described by a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides both the model-init and the shuffle seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for checkpoints, metrics, and the ledger.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Which split to score: train or val.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Train a full ablation grid and summarize it.
    Ablate {
        /// Which grid: table1 (attention mode × depth) or table2
        /// (component build-up).
        #[arg(long)]
        suite: String,
        /// Seeds per configuration (runs use seeds 1..=N).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training epochs per run.
        #[arg(long, default_value_t = 30)]
        epochs: usize,
    },
    /// Write attention heatmaps and raw tensors for one dataset sample.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample addressed as <dataset dir>/<id>, e.g. data/00012.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    // Flag errors exit with code 2 via clap itself.
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Worker-parallelism cap from the environment; defaults to 1.
fn thread_cap() -> usize {
    std::env::var("M3ATT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".to_string())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { n, size, seed, out, force } => {
            let manifest = generate_dataset(n, size, seed, &out, force)?;
            println!(
                "wrote {} samples ({} train / {} val) to {}",
                manifest.entries.len(),
                manifest.split_entries(Split::Train).len(),
                manifest.split_entries(Split::Val).len(),
                manifest_path(&out).display()
            );
        }
        Cmd::Train { config, seed, out } => {
            let kv = KvConfig::load(&config)?;
            let cfg = TrainConfig::from_kv(&kv, out, seed)?;
            let start = Instant::now();
            let outcome = train(&cfg, &mut |log| println!("{}", log.render()))?;
            let wall = start.elapsed().as_secs_f64();
            if let Some(p) = &outcome.probe {
                println!(
                    "divergence_probe={} baseline_loss={:.6}",
                    if p.diverged { "diverged" } else { "converging" },
                    p.baseline_loss
                );
            }
            print!("{}", outcome.report.render_text());
            append_ledger(
                &cfg.out_dir.join("results.tsv"),
                &ledger_row("train", &file_stem(&config), cfg.train_seed, &outcome.report, wall),
            )?;
            println!("final checkpoint: {}", outcome.final_ckpt.display());
        }
        Cmd::Eval { checkpoint, data, split } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                other => {
                    return Err(Error::Config(format!(
                        "unknown split '{other}' (expected train or val)"
                    )))
                }
            };
            let model = load_model(&checkpoint)?;
            let manifest = load_manifest(&data)?;
            let entries = manifest.split_entries(split);
            if entries.is_empty() {
                return Err(Error::Data(format!("split {} is empty", split.as_str())));
            }
            let start = Instant::now();
            let samples = load_split(&data, &entries, manifest.meta.s)?;
            let report = evaluate_samples(&model, &samples)?;
            let wall = start.elapsed().as_secs_f64();
            print!("{}", report.render_text());
            let ledger = checkpoint
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .join("results.tsv");
            let label = format!("{}:{}", file_stem(&checkpoint), split.as_str());
            append_ledger(&ledger, &ledger_row("eval", &label, model.cfg.seed, &report, wall))?;
        }
        Cmd::Ablate { suite, seeds, data, out, epochs } => {
            let suite = Suite::parse(&suite)?;
            let template = TrainConfig {
                model: ModelConfig::toy(),
                epochs,
                batch: 8,
                lr: 1e-3,
                schedule: LrSchedule::Step {
                    decay: 0.1,
                    every: (epochs * 4).div_ceil(5).max(1),
                },
                train_seed: 1,
                data_dir: data,
                out_dir: out,
                ckpt_every: 0,
                stop_at_val_iou: None,
            };
            let outcome = run_suite(suite, &template, seeds, thread_cap(), &mut |line| {
                println!("{line}")
            })?;
            print!("{}", outcome.summary);
            println!("ledger: {}", outcome.ledger_file.display());
        }
        Cmd::DumpAttn { checkpoint, sample, out } => {
            let dir = sample
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            let id = sample
                .file_name()
                .ok_or_else(|| Error::Config("--sample must end in a sample id".into()))?
                .to_string_lossy()
                .into_owned();
            let model = load_model(&checkpoint)?;
            let manifest = load_manifest(dir)?;
            let entry = manifest
                .entries
                .iter()
                .find(|e| e.id == id)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "sample '{id}' not found in {}",
                        manifest_path(dir).display()
                    ))
                })?;
            let loaded = load_sample(dir, entry, manifest.meta.s)?;
            let paths = dump_attention(&model, &loaded.image, &loaded.tokens, &out)?;
            println!("expression: {}", loaded.expression);
            for p in &paths {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
