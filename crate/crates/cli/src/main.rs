//! `distill-lab`: dataset generation, training, rendering and benchmarks.
//!
//! Exit codes: 0 success, 1 assertion failure, 2 usage or config error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distill_lab::bench::Suite;

mod commands;

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "distill-lab", version, about = "Score-distillation inpainting laboratory")]
struct Cli {
    /// Worker threads (overridden by DISTILL_LAB_THREADS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the ground-truth grids and write the dataset, prior means and grids.
    Genscene(ConfigArgs),
    /// Train a field on a dataset and write metrics, checkpoints and final metrics.
    Train(TrainArgs),
    /// Render color, depth and normal images of a checkpoint or grid.
    Render(RenderArgs),
    /// Run one benchmark suite.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the config's seeds with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Validate and print the resolved config without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the iteration count.
    #[arg(long)]
    iters: Option<u64>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Checkpoint directory, or a `.vxg` grid file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// `poses.json`, or a dataset directory containing one.
    #[arg(long)]
    poses: PathBuf,
    /// Views to render (default: all).
    #[arg(long = "view", value_delimiter = ',')]
    views: Vec<usize>,
    /// Long side of the output in pixels; aspect ratio is preserved.
    #[arg(long)]
    res: Option<usize>,
    /// Samples per ray.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value = "renders")]
    out: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// One of: gradcheck, identities, priors, invariants, variance, omega3, compare.
    suite: Suite,
    #[command(flatten)]
    common: ConfigArgs,
}

fn thread_count(jobs: Option<usize>) -> Result<Option<usize>, Failure> {
    match std::env::var("DISTILL_LAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("DISTILL_LAB_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => match jobs {
            Some(0) => Err(Failure::Usage("--jobs must be positive".into())),
            j => Ok(j),
        },
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = thread_count(cli.jobs)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Genscene(a) => commands::genscene(&a.config, a.out, a.seed, a.dry_run),
        Command::Train(a) => commands::train(commands::TrainRequest {
            config: a.common.config,
            out: a.common.out,
            seed: a.common.seed,
            resume: a.resume,
            iters: a.iters,
            dry_run: a.common.dry_run,
        }),
        Command::Render(a) => commands::render(commands::RenderRequest {
            checkpoint: a.checkpoint,
            poses: a.poses,
            views: a.views,
            res: a.res,
            samples: a.samples,
            out: a.out,
            dry_run: a.dry_run,
        }),
        Command::Bench(a) => commands::bench(a.suite, &a.common.config, a.common.out, a.common.seed, a.common.dry_run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
