//! `cvis-forge`: synthesize annotated vehicle scenes, bake and inpaint
//! texture atlases, recover poses from dense correspondences, and evaluate
//! the results.
//!
//! Every command reads an optional TOML configuration (flags win over file
//! values), writes its artifacts plus a resolved-config manifest into the
//! output directory, and exits 0 on success, 1 on a domain failure (e.g.
//! placement exhaustion), or 2 on a usage or configuration error.

mod commands;
mod config;
mod dumps;

use clap::{Args, Parser, Subcommand};
use config::{InpaintMethod, PipelineConfig};
use std::path::PathBuf;

/// A failed run, split by exit code: usage/config errors exit 2, domain
/// errors exit 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(String),
}

/// Shorthand for mapping library errors onto domain failures.
pub fn domain<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Domain(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "cvis-forge",
    version,
    about = "Synthetic vehicle scenes with exact ground truth, texture baking/inpainting, and RANSAC-PnP pose recovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (a manifest written by a previous run also works).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Root RNG seed (overrides the config).
    #[arg(short, long)]
    seed: Option<u64>,
    /// Output directory (output file for gen-template).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural vehicle template mesh (plus its PCA sidecar).
    GenTemplate {
        #[command(flatten)]
        common: Common,
    },
    /// Project one annotated instance's pixels back into its texture atlas.
    Bake {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (from `synthesize`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Scene index within the dataset.
        #[arg(long)]
        scene: Option<usize>,
        /// Instance id within the scene.
        #[arg(long)]
        instance: Option<u32>,
        /// Template mesh file matching the instance.
        #[arg(long)]
        template: Option<PathBuf>,
        /// Atlas resolution (multiple of 6).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Fill the invalid texels of a baked atlas.
    Inpaint {
        #[command(flatten)]
        common: Common,
        /// Atlas color PNG (expects `<stem>.valid.png` beside it).
        #[arg(long)]
        atlas: Option<PathBuf>,
        /// Hole-filling method.
        #[arg(long, value_enum)]
        method: Option<InpaintMethod>,
    },
    /// Render a seeded dataset of annotated scenes.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Number of scenes.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        /// Vehicles per scene.
        #[arg(long)]
        vehicles: Option<usize>,
    },
    /// Recover 6-DoF poses from dense correspondences.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; poses are estimated for every instance.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Correspondence text file for a single standalone solve.
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Score an estimates dump against dataset ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Estimates file or the directory containing `estimates.json`.
        #[arg(long)]
        estimates: Option<PathBuf>,
    },
    /// Time every pipeline stage on a standard workload.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

fn main() {
    match run(Cli::parse()) {
        Ok(()) => {}
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (common, command) = match &cli.command {
        Command::GenTemplate { common } => (common, "gen-template"),
        Command::Bake { common, .. } => (common, "bake"),
        Command::Inpaint { common, .. } => (common, "inpaint"),
        Command::Synthesize { common, .. } => (common, "synthesize"),
        Command::Estimate { common, .. } => (common, "estimate"),
        Command::Evaluate { common, .. } => (common, "evaluate"),
        Command::Bench { common } => (common, "bench"),
    };
    let mut cfg = PipelineConfig::load(common.config.as_deref())?;
    cfg.run = None;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        if command == "gen-template" {
            cfg.gen_template.out = Some(out.clone());
        } else {
            cfg.paths.output = out.clone();
        }
    }
    match &cli.command {
        Command::GenTemplate { .. } => {}
        Command::Bake {
            dataset,
            scene,
            instance,
            template,
            resolution,
            ..
        } => {
            merge(&mut cfg.paths.dataset, dataset);
            merge_val(&mut cfg.bake.scene, scene);
            merge_val(&mut cfg.bake.instance, instance);
            merge(&mut cfg.bake.template, template);
            merge_val(&mut cfg.bake.resolution, resolution);
        }
        Command::Inpaint { atlas, method, .. } => {
            merge(&mut cfg.paths.atlas, atlas);
            merge_val(&mut cfg.inpaint.method, method);
        }
        Command::Synthesize {
            count,
            width,
            height,
            vehicles,
            ..
        } => {
            merge_val(&mut cfg.synthesize.scenes, count);
            merge_val(&mut cfg.synthesize.width, width);
            merge_val(&mut cfg.synthesize.height, height);
            merge_val(&mut cfg.synthesize.vehicles, vehicles);
        }
        Command::Estimate {
            dataset, points, ..
        } => {
            merge(&mut cfg.paths.dataset, dataset);
            merge(&mut cfg.paths.points, points);
        }
        Command::Evaluate {
            dataset, estimates, ..
        } => {
            merge(&mut cfg.paths.dataset, dataset);
            merge(&mut cfg.paths.estimates, estimates);
        }
        Command::Bench { .. } => {}
    }
    cfg.validate()?;
    init_threads(&cfg)?;

    match cli.command {
        Command::GenTemplate { .. } => commands::gen_template::run(&cfg),
        Command::Bake { .. } => commands::bake::run(&cfg),
        Command::Inpaint { .. } => commands::inpaint::run(&cfg),
        Command::Synthesize { .. } => commands::synthesize::run(&cfg),
        Command::Estimate { .. } => commands::estimate::run(&cfg),
        Command::Evaluate { .. } => commands::evaluate::run(&cfg),
        Command::Bench { .. } => commands::bench::run(&cfg),
    }
}

fn merge(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if let Some(v) = flag {
        *slot = Some(v.clone());
    }
}

fn merge_val<T: Copy>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = *v;
    }
}

/// Configure the global worker pool: `CVIS_FORGE_THREADS` beats the config
/// field; 0 keeps rayon's default (one thread per core).
fn init_threads(cfg: &PipelineConfig) -> Result<(), Failure> {
    let threads = match std::env::var("CVIS_FORGE_THREADS") {
        Ok(v) => v.parse::<usize>().map_err(|_| {
            Failure::Usage(format!("CVIS_FORGE_THREADS={v} is not a thread count"))
        })?,
        Err(_) => cfg.parallelism,
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}
