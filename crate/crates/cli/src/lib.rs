//! Command-line workbench around `plume-core`: builds the procedural shape
//! dataset, trains the diffusion/SDF/classifier models, samples point clouds,
//! extracts meshes, and evaluates sample sets.
//!
//! Every run is driven by a JSON [`config::RunConfig`] plus a handful of
//! command flags that override individual fields. All randomness funnels
//! through [`streams`], so any command with a fixed seed is byte-identical
//! across runs on one machine, artifacts and sidecars included (wall-clock
//! timings live in separate files that make no determinism promise).

pub mod commands;
pub mod config;
pub mod lockfile;
pub mod rgbad;
pub mod streams;

pub use commands::{CResult, CliError};

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "plume",
    version,
    about = "Point-cloud diffusion workbench: dataset building, training, sampling, meshing, evaluation"
)]
pub struct Cli {
    /// Path to the run-config JSON file (required by every subcommand).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Builds the procedural shape dataset into `dataset_dir`.
    BuildDataset,
    /// Trains one model kind; resumes automatically from its checkpoint.
    Train {
        /// One of: base, upsampler, sdf, classifier.
        #[arg(long)]
        kind: String,
        /// Overrides the training step target from the config.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Samples point clouds from the trained base (and optionally upsampler).
    Sample {
        /// Number of clouds to generate (default: `sampler.count`).
        #[arg(long)]
        count: Option<usize>,
        /// Output directory (default: `<run_dir>/samples`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict conditioning to one shape class (by name).
        #[arg(long)]
        class: Option<String>,
        /// Conditioning view file for `view_source = image_file`.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Skip the upsampler stage even if configured.
        #[arg(long)]
        no_upsampler: bool,
        /// Overrides `sampler.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides `sampler.guidance_scale`.
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Extracts a colored mesh from a point-cloud PLY via the SDF model.
    Mesh {
        /// Input point-cloud PLY file.
        #[arg(long)]
        input: PathBuf,
        /// Output OBJ file.
        #[arg(long)]
        output: PathBuf,
        /// Lattice resolution per axis (default 32).
        #[arg(long)]
        grid: Option<usize>,
        /// SDF checkpoint (default: `<run_dir>/sdf.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scores a sample directory: P-FID, P-IS, class retrieval precision.
    Eval {
        /// Directory produced by `plume sample`.
        #[arg(long)]
        samples: PathBuf,
        /// Reference statistics file (default: `<run_dir>/stats_lo.ckpt`).
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Classifier checkpoint (default: `<run_dir>/classifier.ckpt`).
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Report output path (default: `<samples>/report.json`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Computes reference feature statistics over the dataset clouds.
    Stats {
        /// Output path (default: `<run_dir>/stats_<points>.ckpt`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Which cloud resolution to featurize: `hi` (1024) or `lo` (256).
        #[arg(long, default_value = "hi")]
        points: String,
    },
    /// Exports one dataset record as PLY clouds plus view image files.
    Export {
        /// Record index within the dataset.
        #[arg(long)]
        record: usize,
        /// Output directory (default: `<run_dir>/export/record_<index>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Loads the config, applies global overrides, and dispatches. Errors map to
/// exit code 2 ([`CliError::Config`]) or 3 ([`CliError::Runtime`]) in `main`.
pub fn run(cli: Cli) -> CResult<()> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config <FILE> is required".into()))?;
    let mut cfg = config::RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::BuildDataset => commands::build_dataset::run(&cfg),
        Command::Train { kind, steps } => commands::train::run(&cfg, &kind, steps),
        Command::Sample {
            count,
            out,
            class,
            image,
            no_upsampler,
            steps,
            guidance,
        } => commands::sample::run(
            &cfg,
            &commands::sample::SampleArgs {
                count,
                out,
                class,
                image,
                no_upsampler,
                steps,
                guidance,
            },
        ),
        Command::Mesh {
            input,
            output,
            grid,
            checkpoint,
        } => commands::mesh::run(&cfg, &input, &output, grid, checkpoint.as_deref()),
        Command::Eval {
            samples,
            stats,
            classifier,
            out,
        } => commands::eval::run(
            &cfg,
            &samples,
            stats.as_deref(),
            classifier.as_deref(),
            out.as_deref(),
        ),
        Command::Stats { out, points } => commands::stats::run(&cfg, out.as_deref(), &points),
        Command::Export { record, out } => commands::export::run(&cfg, record, out.as_deref()),
    }
}
