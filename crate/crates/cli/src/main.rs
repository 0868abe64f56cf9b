//! `osteo`: runs the shape-estimation experiment stage by stage or end to end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use osteo_core::pipeline::{self, stages, ExperimentConfig, Layout};

#[derive(Parser)]
#[command(name = "osteo", version, about = "Shape estimation from synthetic radiographs")]
struct Cli {
    /// Experiment configuration (JSON). Defaults to the selected preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory shared by all stages.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom population.
    Phantom,
    /// Render the projection dataset.
    Render,
    /// Split images, then train the encoder on the training specimens.
    Train,
    /// Embed every rendered image.
    Embed,
    /// kNN classification and validation triplet accuracy.
    Classify,
    /// Pairwise separation analysis on the held-out embeddings.
    Pairs,
    /// Extract meshes and estimate the shape of each held-out specimen.
    Estimate,
    /// Align one mesh onto another and report their distance.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Every stage in order.
    Run,
    /// Print the effective configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display())),
        None => {
            let c = match cli.preset {
                Preset::Desk => ExperimentConfig::desk(),
                Preset::Paper => ExperimentConfig::paper(),
            };
            c.validate()?;
            Ok(c)
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("OSTEO_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("OSTEO_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn stage<T>(name: &str, f: impl FnOnce() -> osteo_core::Result<T>) -> Result<T> {
    f().with_context(|| format!("stage `{name}` failed"))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    let out: &Path = &cli.out;
    let layout = Layout::new(out);
    if let Command::Evaluate {
        pred,
        truth,
        samples,
        seed,
    } = &cli.command
    {
        let r = pipeline::evaluate_report(pred, truth, *samples, *seed)?;
        println!("{}", pipeline::format_distance(&r));
        return Ok(());
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Phantom => {
            let s = stage("phantom", || stages::phantom(&cfg, &layout))?;
            println!("{} specimens -> {}", s.len(), layout.population().display());
        }
        Command::Render => {
            let m = stage("render", || stages::render(&cfg, &layout))?;
            println!("{} images -> {}", m.rows.len(), layout.dataset().display());
        }
        Command::Train => {
            let s = stage("split", || stages::split(&cfg, &layout))?;
            println!(
                "split: {} train, {} validation, {} held-out fit, {} held-out query",
                s.train.len(),
                s.validation.len(),
                s.holdout_fit.len(),
                s.holdout_query.len()
            );
            let h = stage("train", || stages::train(&cfg, &layout))?;
            for e in &h.epochs {
                println!(
                    "epoch {:3}  loss {:.6}  triplet accuracy {:.4}",
                    e.epoch, e.loss, e.triplet_accuracy
                );
            }
            let n = stage("hygiene", || stages::check_holdout_hygiene(&cfg, &layout))?;
            println!("{n} batch images checked, none held out");
        }
        Command::Embed => {
            let s = stage("embed", || stages::embed(&cfg, &layout))?;
            println!("{} embeddings -> {}", s.len(), layout.embeddings().display());
        }
        Command::Classify => print_json(&stage("classify", || stages::classify(&cfg, &layout))?)?,
        Command::Pairs => {
            for r in stage("pairs", || stages::pairs(&cfg, &layout))? {
                println!(
                    "{:14} rows {:5}  intra {:7}  inter {:8}  accuracy {:.4}",
                    r.filter.name,
                    r.rows,
                    r.intra_pairs,
                    r.inter_pairs,
                    r.accuracy
                );
            }
        }
        Command::Estimate => {
            stage("meshes", || stages::meshes(&cfg, &layout))?;
            for e in stage("estimate", || stages::estimate(&cfg, &layout))? {
                println!(
                    "specimen {} -> {}  rank {}/{}  {}",
                    e.specimen_id,
                    e.predicted,
                    e.better_match_rank,
                    e.candidates,
                    pipeline::format_distance(&e.distance)
                );
            }
        }
        Command::Run => {
            let report = pipeline::run_pipeline(&cfg, out)?;
            print!("{}", report.headline_csv());
        }
        Command::Config => print_json(&cfg)?,
        Command::Evaluate { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
