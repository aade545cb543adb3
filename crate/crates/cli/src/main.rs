use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedpd_harness::{data, replay_session, report, train, ExperimentConfig, Regime};

#[derive(Parser)]
#[command(name = "fedpd", version, about = "Percent-density cascade experiments on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value config file; defaults to <out>/config.txt when that exists
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// centralized-A | centralized-B | centralized-pooled | federated
    #[arg(long)]
    regime: Option<Regime>,
    /// Experiment root directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and held-out phantom cohorts
    Generate {
        #[command(flatten)]
        common: Common,
        /// Replace existing data in a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Train one regime and save its model
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate trained models on every held-out cohort and write reports
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Replay a recorded federated session and check the saved model
    Replay {
        /// Session file; defaults to <out>/models/federated/session.mfls
        session: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    #[command(hide = true)]
    Aggregator {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
    },
    #[command(hide = true)]
    Collaborator {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        institution: String,
        #[arg(long)]
        connect: String,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match (&common.config, &common.out) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(out)) if out.join("config.txt").exists() => ExperimentConfig::load(&out.join("config.txt"))?,
        _ => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(regime) = common.regime {
        config.regime = regime;
    }
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, force } => {
            let config = resolve(&common)?;
            let summary = data::generate(&config, force)?;
            for (name, train, test) in summary.institutions {
                println!("{name}: {train} training / {test} held-out images");
            }
            println!("wrote {}", config.out.display());
        }
        Command::Train { common } => {
            let config = resolve(&common)?;
            let exe = std::env::current_exe().context("locating the harness binary")?;
            let dir = train::train(&config, &exe)?;
            println!("{} model saved to {}", config.regime, dir.display());
        }
        Command::Evaluate { common } => {
            let config = resolve(&common)?;
            let r = report::evaluate(&config)?;
            print!("{}", report::text_report(&r));
            println!("\nreports written to {}", config.report_dir().display());
        }
        Command::Replay { session, common } => {
            let path = match session {
                Some(p) => p,
                None => resolve(&common)?.model_dir(Regime::Federated).join(train::SESSION_FILE),
            };
            let check = replay_session(&path)?;
            println!("replayed {} rounds from {}", check.outcome.rounds, path.display());
            match check.matches_saved_model {
                Some(true) => println!("final weights match the saved federated model bit for bit"),
                Some(false) => bail!("replayed weights differ from the saved federated model"),
                None => println!("no saved model next to the session; aggregation checks passed"),
            }
        }
        Command::Aggregator { config, model_dir } => {
            let config = ExperimentConfig::load(&config)?;
            train::run_aggregator(&config, &model_dir, &mut io::stdout())?;
        }
        Command::Collaborator {
            config,
            institution,
            connect,
        } => {
            let config = ExperimentConfig::load(&config)?;
            train::run_institution(&config, &institution, &connect)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
