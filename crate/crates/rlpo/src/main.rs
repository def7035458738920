use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rlpo::artifacts::{self, GeneratorTraining, PrepareConfig, ProbeTraining, SeedsConfig};
use rlpo::engine::{self, RunOptions};
use rlpo::report::{evaluate, EvalConfig};
use rlpo::{server, FeedbackMode, RunConfig, RunError, RunResult};
use rlpo_core::synthworld::{build_world, Split, World, WorldConfig};
use serde::de::DeserializeOwned;

/// Exit status of `eval` when no keyword reached the explainable state.
const EXIT_NONE_EXPLAINABLE: u8 = 3;

#[derive(Parser)]
#[command(name = "rlpo", version, about = "Concept discovery for image classifiers with RL-guided preference optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic texture worlds.
    World {
        #[command(subcommand)]
        command: WorldCommand,
    },
    /// Train the classifier under test on a world.
    TrainProbe {
        #[arg(long)]
        world: PathBuf,
        /// Checkpoint stem; writes <stem>.json and <stem>.bin.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain the diffusion generator on the world's keyword textures.
    PretrainGen {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the number of pretraining steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Build the keyword action space from the world's class images.
    Seeds {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// World, probe, generator, action space and a run config in one go.
    Prepare {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pretrain_steps: Option<usize>,
    },
    /// Start a new run.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Serve the HTTP API while running; required in hf mode.
        #[arg(long)]
        port: Option<u16>,
        /// Stop with a checkpoint after this many steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Continue a run from its latest checkpoint.
    Resume {
        dir: PathBuf,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Evaluate a finished run and write its report.
    Eval {
        dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve a run over HTTP, driving it to completion if unfinished.
    Serve {
        dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        mode: Option<FeedbackMode>,
    },
}

#[derive(Subcommand)]
enum WorldCommand {
    Build {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> RunResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
}

fn load_world(dir: &Path) -> RunResult<World> {
    World::load(dir).map_err(|e| RunError::Config(format!("cannot load world {}: {e}", dir.display())))
}

fn print_json<T: serde::Serialize>(v: &T) -> RunResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Drive `dir`, serving the API on `port` if given.
fn drive_dir(dir: &Path, port: Option<u16>) -> RunResult<()> {
    match port {
        Some(p) => server::serve(dir, p, None),
        None => {
            let summary = engine::drive(dir, &RunOptions::default())?;
            if summary.already_complete {
                println!("run in {} is already complete; nothing to do", dir.display());
            } else {
                println!("{} of {} steps done", summary.completed_steps, summary.total_steps);
            }
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> RunResult<u8> {
    match cli.command {
        Command::World {
            command: WorldCommand::Build { config, out },
        } => {
            let cfg: WorldConfig = read_config(config.as_deref())?;
            cfg.validate().map_err(|e| RunError::Config(e.to_string()))?;
            let world = build_world(&cfg)?;
            world.save(&out)?;
            println!("world with {} images written to {}", world.dataset.images.len(), out.display());
        }
        Command::TrainProbe { world, out, config } => {
            let cfg: ProbeTraining = read_config(config.as_deref())?;
            let world = load_world(&world)?;
            let (probe, report) = artifacts::train_probe(&world, &cfg)?;
            probe.save(&out)?;
            println!(
                "probe written to {}: test accuracy {:.4}, final loss {:.4}",
                out.display(),
                probe.accuracy(&world.dataset, Split::Test)?,
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::PretrainGen {
            world,
            out,
            config,
            steps,
        } => {
            let mut cfg: GeneratorTraining = read_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            let world = load_world(&world)?;
            let (generator, report) = artifacts::pretrain_generator(&world, &cfg)?;
            generator.save(&out)?;
            println!(
                "generator written to {}: loss {:.4} -> {:.4}",
                out.display(),
                report.initial_loss,
                report.final_smoothed_loss
            );
        }
        Command::Seeds { world, out, config } => {
            let cfg: SeedsConfig = read_config(config.as_deref())?;
            let world = load_world(&world)?;
            let report = artifacts::seed_keywords(&world, &cfg)?;
            report.action_space.save(&out)?;
            for f in &report.failures {
                log::warn!("describer failure: {f:?}");
            }
            println!(
                "{} keywords kept of {} candidates: {}",
                report.action_space.len(),
                report.candidates,
                report.action_space.keywords().join(", ")
            );
        }
        Command::Prepare {
            out,
            config,
            pretrain_steps,
        } => {
            let mut cfg: PrepareConfig = read_config(config.as_deref())?;
            if let Some(s) = pretrain_steps {
                cfg.generator.pretrain.steps = s;
            }
            print_json(&artifacts::prepare(&out, &cfg)?)?;
        }
        Command::Run {
            config,
            out,
            seed,
            port,
            stop_after,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if cfg.feedback_mode == FeedbackMode::Hf && port.is_none() {
                return Err(RunError::Config("hf mode needs --port to collect votes".into()));
            }
            engine::init_run(&cfg, &out)?;
            if let Some(n) = stop_after {
                let opts = RunOptions {
                    stop_after: Some(n),
                    ..Default::default()
                };
                let s = engine::drive(&out, &opts)?;
                println!("stopped after {} of {} steps", s.completed_steps, s.total_steps);
            } else {
                drive_dir(&out, port)?;
            }
        }
        Command::Resume { dir, port } => drive_dir(&dir, port)?,
        Command::Eval { dir, config } => {
            let cfg: EvalConfig = read_config(config.as_deref())?;
            let report = evaluate(&dir, &cfg)?;
            for e in &report.errors {
                eprintln!("report section failed: {e}");
            }
            if report.explainable_empty {
                println!("no keyword reached the explainable state (eta {})", report.eta);
                return Ok(EXIT_NONE_EXPLAINABLE);
            }
            println!("explainable: {}", report.explainable.join(", "));
            for d in &report.deletion {
                println!("  {:<12} tcav {:.3}  deletion auc {:.4}", d.keyword, d.tcav, d.curve.auc);
            }
        }
        Command::Serve { dir, port, mode } => server::serve(&dir, port, mode)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
