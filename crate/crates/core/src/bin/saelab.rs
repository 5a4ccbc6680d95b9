// SPDX-License-Identifier: MIT OR Apache-2.0

//! `saelab`: run the SAE / steering / backtest pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use saelab_core::experiment::{write_report, ExperimentConfig, Run, Stage, SEED_ENV};
use saelab_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "saelab", version, about = "Sparse-autoencoder features, concept steering and long-short evaluation on a synthetic market")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON) or a run manifest to reproduce.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Start from the small smoke-test config instead of the defaults.
    #[arg(long, conflicts_with = "config")]
    smoke: bool,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, short)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world (news, returns, ground truth).
    Simulate(Common),
    /// Train the toy language model.
    TrainLm(Common),
    /// Train the sparse autoencoder on residual streams.
    TrainSae(Common),
    /// Build feature dossiers and labels.
    Label(Common),
    /// Steering grids: classification portfolios and allocations.
    Steer(Common),
    /// Rank features on the first training window.
    RankFeatures(Common),
    /// Rolling top-k backtest over the feature budgets.
    Backtest(Common),
    /// Cluster feature labels into groups.
    Cluster(Common),
    /// Leave-one-group-out Sharpe attribution.
    Shapley(Common),
    /// Every stage from LM training to steering.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Generate the world first.
        #[arg(long)]
        simulate: bool,
    },
    /// Write report.md for a run directory.
    Report {
        /// Run directory.
        dir: PathBuf,
    },
    /// Print a config file to start from.
    InitConfig {
        #[arg(long)]
        smoke: bool,
    },
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None if c.smoke => ExperimentConfig::smoke(),
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
    }
    Ok(cfg)
}

fn configure_threads(jobs: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

fn run_stages(common: &Common, stages: &[Stage], simulate: bool) -> anyhow::Result<()> {
    configure_threads(common.jobs)?;
    let cfg = load_config(common)?;
    let mut run = Run::new(&cfg, common.force)?;
    let mut plan = Vec::new();
    if simulate {
        plan.push(Stage::Simulate);
    } else if stages == Stage::PIPELINE && !run.has_world() {
        return Err(Error::Config(format!("no world in {}; pass --simulate or run `simulate` first", run.dir().display())).into());
    }
    plan.extend_from_slice(stages);
    for stage in &plan {
        let t = Instant::now();
        run.execute(&[*stage]).with_context(|| format!("stage {}", stage.name()))?;
        eprintln!("{:<14} {:>8.1}s", stage.name(), t.elapsed().as_secs_f64());
    }
    eprintln!("outputs in {}", run.dir().display());
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(c) => run_stages(&c, &[Stage::Simulate], false),
        Command::TrainLm(c) => run_stages(&c, &[Stage::TrainLm], false),
        Command::TrainSae(c) => run_stages(&c, &[Stage::TrainSae], false),
        Command::Label(c) => run_stages(&c, &[Stage::Label], false),
        Command::Steer(c) => run_stages(&c, &[Stage::Steer], false),
        Command::RankFeatures(c) => run_stages(&c, &[Stage::RankFeatures], false),
        Command::Backtest(c) => run_stages(&c, &[Stage::Backtest], false),
        Command::Cluster(c) => run_stages(&c, &[Stage::Cluster], false),
        Command::Shapley(c) => run_stages(&c, &[Stage::Shapley], false),
        Command::Pipeline { common, simulate } => run_stages(&common, &Stage::PIPELINE, simulate),
        Command::Report { dir } => {
            if !dir.is_dir() {
                return Err(Error::Config(format!("{} is not a directory", dir.display())).into());
            }
            let missing = write_report(&dir)?;
            if missing.is_empty() {
                eprintln!("wrote {}", dir.join("report.md").display());
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("incomplete run; missing: {}", missing.join(", "))).into())
            }
        }
        Command::InitConfig { smoke } => {
            let cfg = if smoke { ExperimentConfig::smoke() } else { ExperimentConfig::default() };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
