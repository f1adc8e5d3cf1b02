//! `trajstitch`: seeded, config-driven pipeline stages.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 stale input
//! artifact, 1 any other failure.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{AugmentInputs, Ctx, DataKind, EvalInputs};
use config::RunConfig;
use error::{CliError, CliResult};
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "trajstitch", version, about = "Trajectory stitching pipeline on grid mazes")]
struct Cli {
    /// Directory holding manifest.json.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// key = value config file, applied before --set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. --set embedding.lr=1e-3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Total training steps; 0 writes the initialized model.
    #[arg(long)]
    steps: Option<u64>,
    /// Checkpoint (`<model>.ckpt.json`) to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as key = value lines.
    Config,
    /// Generate a Stitch or Explore dataset.
    GenData {
        /// Built-in maze (compact8, medium, open5) or ASCII maze file.
        #[arg(long)]
        spec: String,
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the temporal-distance embedding.
    TrainEmbedding(TrainArgs),
    /// Train the bridge (stitcher) diffusion model.
    TrainStitcher(TrainArgs),
    /// Train the inverse dynamics model.
    TrainInverse(TrainArgs),
    /// Train the high-level waypoint diffusion model.
    TrainPlanner(TrainArgs),
    /// Build the segment index over embedded segment starts.
    BuildIndex {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the augmented dataset.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        stitcher: PathBuf,
        #[arg(long)]
        inverse: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-loop evaluation of a planner.
    Eval {
        #[arg(long)]
        spec: String,
        #[arg(long)]
        planner: PathBuf,
        #[arg(long)]
        stitcher: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        /// JSON list of {"start": {"x", "y"}, "goal": {"x", "y"}}; defaults to
        /// a stratified catalog.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// off, 50, 100 or 200.
        #[arg(long)]
        replanning: Option<String>,
    },
    /// Draw dataset trajectories over the maze, one SVG per subset.
    Plot {
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Trajectory indices such as 0-4 or 1,3,9 (repeatable).
        #[arg(long = "subset", default_values_t = [String::from("0-4")])]
        subsets: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Config => "config",
            Self::GenData { .. } => "gen-data",
            Self::TrainEmbedding(_) => "train-embedding",
            Self::TrainStitcher(_) => "train-stitcher",
            Self::TrainInverse(_) => "train-inverse",
            Self::TrainPlanner(_) => "train-planner",
            Self::BuildIndex { .. } => "build-index",
            Self::Augment { .. } => "augment",
            Self::Eval { .. } => "eval",
            Self::Plot { .. } => "plot",
        }
    }

    /// Flag shorthands expressed as config overrides.
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let steps = |section: &'static str, a: &TrainArgs| {
            a.steps.map(|s| (section, s.to_string())).into_iter().collect()
        };
        match self {
            Self::GenData { seed, .. } => seed.map(|s| ("data.seed", s.to_string())).into_iter().collect(),
            Self::Augment { seed, .. } => seed.map(|s| ("augment.seed", s.to_string())).into_iter().collect(),
            Self::TrainEmbedding(a) => steps("embedding.train_steps", a),
            Self::TrainStitcher(a) => steps("stitcher.train_steps", a),
            Self::TrainInverse(a) => steps("inverse.train_steps", a),
            Self::TrainPlanner(a) => steps("planner.train_steps", a),
            Self::Eval { replanning, .. } => replanning
                .iter()
                .map(|r| ("plan.replanning_interval", r.clone()))
                .collect(),
            _ => Vec::new(),
        }
    }
}

fn effective_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    for pair in &cli.set {
        cfg.assign(pair)?;
    }
    for (k, v) in cli.command.overrides() {
        cfg.set(k, &v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    let config = effective_config(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", config.to_text());
        return Ok(());
    }
    let mut ctx = Ctx {
        manifest: Manifest::load(&cli.workdir)?,
        root: cli.workdir.clone(),
        config,
        name: cli.command.name(),
        invocation: std::iter::once("trajstitch".to_string())
            .chain(std::env::args().skip(1))
            .collect::<Vec<_>>()
            .join(" "),
    };
    let train = |a: &TrainArgs| (a.data.clone(), a.out.clone(), a.resume.clone());
    match &cli.command {
        Command::Config => unreachable!(),
        Command::GenData { spec, kind, out, .. } => commands::gen_data(&mut ctx, spec, *kind, out),
        Command::TrainEmbedding(a) => {
            let (d, o, r) = train(a);
            commands::train_embedding(&mut ctx, &d, &o, r.as_deref())
        }
        Command::TrainInverse(a) => {
            let (d, o, r) = train(a);
            commands::train_inverse(&mut ctx, &d, &o, r.as_deref())
        }
        Command::TrainStitcher(a) => {
            let (d, o, r) = train(a);
            commands::train_diffusion(&mut ctx, false, &d, &o, r.as_deref())
        }
        Command::TrainPlanner(a) => {
            let (d, o, r) = train(a);
            commands::train_diffusion(&mut ctx, true, &d, &o, r.as_deref())
        }
        Command::BuildIndex { data, embedding, out } => commands::build_index(&mut ctx, data, embedding, out),
        Command::Augment {
            data,
            embedding,
            index,
            stitcher,
            inverse,
            out,
            ..
        } => commands::augment(
            &mut ctx,
            &AugmentInputs {
                data,
                embedding,
                index,
                stitcher,
                inverse,
            },
            out,
        ),
        Command::Eval {
            spec,
            planner,
            stitcher,
            embedding,
            tasks,
            out,
            ..
        } => commands::eval(
            &mut ctx,
            &EvalInputs {
                maze: spec,
                planner,
                stitcher,
                embedding,
                tasks: tasks.as_deref().map(Path::new),
            },
            out,
        ),
        Command::Plot { data, out, subsets } => commands::plot(&mut ctx, data, out, subsets),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trajstitch: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
