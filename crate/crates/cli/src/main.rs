use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use graphmod::pipeline::{self, BatchOutcome, Cell, RunConfig, SynthConfig};

/// Moving object detection with graph convolutional networks.
#[derive(Parser)]
#[command(name = "graphmod", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the base seed of the config (or of `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print what would run and write nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and a run config for it.
    Synth {
        /// Dataset description (TOML with `[[videos]]`); a built-in
        /// four-video suite when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Background models and per-node feature vectors.
    Features,
    /// k-NN graph over the feature vectors.
    Graph,
    /// Train one model per (partition, density, repetition).
    Train {
        /// Only this partition.
        #[arg(long)]
        partition: Option<usize>,
    },
    /// Score saved models on their unseen videos.
    Evaluate {
        #[arg(long)]
        partition: Option<usize>,
    },
    /// Print challenge-level F-measures of evaluated runs.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_deref().context("--config is required for this command")?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_cells(cells: &[Cell]) {
    for c in cells {
        println!(
            "  partition {} density {} repetition {} (split seed {}, train seed {})",
            c.partition, c.density, c.repetition, c.split_seed, c.train_seed
        );
    }
}

fn cache_state(dir: &Path) -> &'static str {
    if dir.exists() {
        "cached"
    } else {
        "to compute"
    }
}

fn finish(what: &str, outcome: &BatchOutcome) -> ExitCode {
    println!("{what}: {} completed, {} failed", outcome.completed, outcome.failures.len());
    for f in &outcome.failures {
        eprintln!(
            "  partition {} density {} repetition {:?}: {}",
            f.partition, f.density, f.repetition, f.error
        );
    }
    if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn synth(cli: &Cli, spec: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let mut suite = match spec {
        Some(p) => SynthConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => pipeline::default_synthetic_suite(cli.seed.unwrap_or(0)),
    };
    if let (Some(seed), Some(_)) = (cli.seed, spec) {
        for (i, v) in suite.videos.iter_mut().enumerate() {
            v.seed = graphmod::seed::derive_seed(seed, "synthetic", &[i as u64]);
        }
    }
    for v in &suite.videos {
        v.validate().with_context(|| format!("video {}", v.video_id))?;
    }
    if cli.dry_run {
        println!("would write {} videos to {}", suite.videos.len(), out.display());
        for v in &suite.videos {
            println!("  {}: {} frames of {}x{}", v.video_id, v.frame_count, v.width, v.height);
        }
        return Ok(ExitCode::SUCCESS);
    }
    pipeline::write_synthetic_dataset(&suite.videos, out)?;
    println!("wrote {} videos and {}", suite.videos.len(), out.join("run.toml").display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Command::Synth { spec, out } = &cli.command {
        return synth(cli, spec.as_deref(), out);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Features => {
            let dir = cfg.features_dir();
            if cli.dry_run {
                println!("features for {} videos -> {} ({})", cfg.data.videos.len(), dir.display(), cache_state(&dir));
                return Ok(ExitCode::SUCCESS);
            }
            let stage = pipeline::features_stage(&cfg)?;
            println!("{} nodes x {} features in {}", stage.matrix.nodes(), stage.matrix.dimension(), dir.display());
        }
        Command::Graph => {
            let dir = cfg.graph_dir();
            if cli.dry_run {
                println!("features -> {} ({})", cfg.features_dir().display(), cache_state(&cfg.features_dir()));
                println!("k-NN graph, k = {} -> {} ({})", cfg.k, dir.display(), cache_state(&dir));
                return Ok(ExitCode::SUCCESS);
            }
            let stage = pipeline::features_stage(&cfg)?;
            let adj = pipeline::graph_stage(&cfg, &stage)?;
            println!("graph over {} nodes in {}", adj.n(), dir.display());
        }
        Command::Train { partition } | Command::Evaluate { partition } => {
            let cells = pipeline::plan(&cfg, *partition)?;
            let training = matches!(cli.command, Command::Train { .. });
            if cli.dry_run {
                println!("{} {} runs:", if training { "train" } else { "evaluate" }, cells.len());
                print_cells(&cells);
                return Ok(ExitCode::SUCCESS);
            }
            let prepared = pipeline::prepare(&cfg)?;
            info!("{} labeled nodes of {}", prepared.labels.covered.iter().filter(|c| **c).count(), prepared.labels.nodes());
            let (what, outcome) = if training {
                ("train", pipeline::train_cells(&cfg, &prepared, &cells)?)
            } else {
                ("evaluate", pipeline::evaluate_cells(&cfg, &prepared, &cells)?)
            };
            return Ok(finish(what, &outcome));
        }
        Command::Report => {
            let rows = pipeline::collect_reports(&cfg)?;
            if rows.is_empty() {
                bail!("no evaluated runs under {}", cfg.output_dir.display());
            }
            print!("{}", pipeline::render_report(&rows));
            if !cli.dry_run {
                let path = cfg.output_dir.join("report.json");
                std::fs::write(&path, serde_json::to_string_pretty(&rows)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot configure {jobs} worker threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
