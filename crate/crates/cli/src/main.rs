//! `dualwalk`: preprocess, pretrain, cluster, train, evaluate, and run the
//! long-path harness, with every stage writing a hashed run directory.

mod artifact;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualwalk::eval::TieMode;
use dualwalk::kg::{Split, SplitPaths};
use dualwalk::longpath::LongPathMode;

use crate::commands::TrainSource;
use crate::config::{RunConfig, WalkerKind};
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "dualwalk", version, about = "Dual-agent reinforcement walking over knowledge graphs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Base seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that receives run directories.
    #[arg(long, default_value = "runs", global = true)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory holding train.txt, dev.txt, test.txt.
    #[arg(long, conflicts_with = "train")]
    data: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    dev: Option<PathBuf>,
    #[arg(long, requires = "train")]
    test: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> Option<SplitPaths> {
        if let Some(d) = &self.data {
            return Some(SplitPaths::in_dir(d));
        }
        self.train.as_ref().map(|t| SplitPaths {
            train: t.clone(),
            dev: self.dev.clone(),
            test: self.test.clone(),
        })
    }
}

#[derive(Args, Debug, Default)]
struct EvalArgs {
    /// Beam width.
    #[arg(long)]
    beam: Option<usize>,
    /// Split to evaluate: train, dev, or test.
    #[arg(long, value_parser = commands::parse_split)]
    split: Option<Split>,
    /// Rank with the uniform random-walk baseline instead of the policy.
    #[arg(long)]
    uniform: bool,
    /// Tie handling: optimistic, by-id, or pessimistic.
    #[arg(long, value_parser = commands::parse_ties)]
    ties: Option<TieMode>,
    /// Unfiltered ranks.
    #[arg(long)]
    raw: bool,
}

impl EvalArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(b) = self.beam {
            cfg.eval.beam = b;
        }
        if let Some(s) = self.split {
            cfg.eval.split = s;
        }
        if self.uniform {
            cfg.eval.walker = WalkerKind::Uniform;
        }
        if let Some(t) = self.ties {
            cfg.eval.ties = t;
        }
        if self.raw {
            cfg.eval.filtered = false;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load triple files, build vocabularies, and snapshot the splits.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Pretrain TransE embeddings on a preprocessed graph.
    Pretrain {
        /// A preprocess run directory.
        #[arg(long)]
        graph: PathBuf,
    },
    /// K-means the pretrained entity embeddings into clusters.
    Cluster {
        /// A pretrain run directory.
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Train both agents. Give either a cluster run or raw data.
    Train {
        /// A cluster run directory.
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Beam-search evaluation with Hits@K, MRR, and optionally MAP.
    Eval {
        /// A train run (or, with --uniform, any run with clusters).
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Long-path experiment: remove short paths (or keep the graph) and
    /// sweep walk lengths.
    Longpath {
        /// A cluster run directory.
        #[arg(long)]
        clusters: PathBuf,
        /// Keep the graph and sweep longer walks.
        #[arg(long)]
        recovery: bool,
        /// Comma-separated walk lengths.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
    },
    /// Write a JSON summary of a trained policy checkpoint.
    DumpPolicy {
        #[arg(long)]
        run: PathBuf,
        /// Include every parameter value.
        #[arg(long)]
        values: bool,
    },
    /// Write the top beam paths for some queries.
    DumpTrajectories {
        #[arg(long)]
        run: PathBuf,
        /// Queries to dump.
        #[arg(long, default_value_t = 20)]
        limit: usize,
        /// Paths per query.
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        2 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.sets)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Eval { eval, .. } | Command::DumpTrajectories { eval, .. } => eval.apply(&mut cfg),
        Command::Longpath { recovery, horizons, .. } => {
            if *recovery {
                cfg.longpath.mode = LongPathMode::Recovery;
            }
            if !horizons.is_empty() {
                cfg.longpath.horizons = horizons.clone();
            }
        }
        _ => {}
    }
    cfg.derive_seeds();
    let root = &g.out;
    match cli.command {
        Command::Preprocess { data } => {
            let paths = data
                .paths()
                .ok_or_else(|| CliError::Config("preprocess needs --data or --train".into()))?;
            commands::preprocess(root, &cfg, &paths)
        }
        Command::Pretrain { graph } => commands::pretrain(root, &cfg, &graph),
        Command::Cluster { embeddings } => commands::cluster(root, &cfg, &embeddings),
        Command::Train { clusters, data } => {
            let source = match (&clusters, data.paths()) {
                (Some(dir), None) => TrainSource::Clusters(dir.as_path()),
                (None, Some(paths)) => TrainSource::Data(paths),
                _ => {
                    return Err(CliError::Config(
                        "train needs exactly one of --clusters or --data/--train".into(),
                    ))
                }
            };
            commands::train(root, &cfg, source)
        }
        Command::Eval { run, .. } => commands::eval(root, &cfg, &run),
        Command::Longpath { clusters, .. } => commands::longpath(root, &cfg, &clusters),
        Command::DumpPolicy { run, values } => commands::dump_policy(root, &cfg, &run, values),
        Command::DumpTrajectories { run, limit, top, .. } => commands::dump_trajectories(root, &cfg, &run, limit, top),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
