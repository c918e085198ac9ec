use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use commeta::Error;
use commeta_cli::config::Adaptation;
use commeta_cli::{exit_code, Command, ExperimentConfig, Run};

#[derive(Parser)]
#[command(name = "commeta", version, about = "Few-shot community model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Shot counts to evaluate, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Evaluation episodes per checkpoint and shot count.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[arg(long, global = true, value_enum)]
    adaptation: Option<Profile>,
    /// Evaluate without adapting to the support set.
    #[arg(long, global = true)]
    zero_shot: bool,
    /// Output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Write the configured graph(s) in the ingestion format.
    Generate,
    /// Train one checkpoint per fold.
    Train,
    /// Episodic evaluation of the trained checkpoints.
    Evaluate,
    /// Evaluate trained and re-initialised weights side by side.
    Ablate,
    /// Homophily of the graph and of sampled views.
    Homophily,
    /// Text-only and user-vote baselines.
    Baselines,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Low,
    High,
}

fn run(cli: Cli) -> Result<(), Error> {
    let path = cli
        .config
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(k) = cli.k {
        cfg.evaluate.k = k;
    }
    if let Some(n) = cli.episodes {
        cfg.evaluate.episodes = n;
    }
    if let Some(p) = cli.adaptation {
        cfg.evaluate.adaptation = match p {
            Profile::Low => Adaptation::Low,
            Profile::High => Adaptation::High,
        };
    }
    if cli.zero_shot {
        cfg.evaluate.zero_shot = true;
    }
    let out = cli
        .out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory (--out DIR or out_dir)".into()))?;
    cfg.validate()?;
    let command = match cli.command {
        Cmd::Generate => Command::Generate,
        Cmd::Train => Command::Train,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Ablate => Command::Ablate,
        Cmd::Homophily => Command::Homophily,
        Cmd::Baselines => Command::Baselines,
    };
    let workers = cli.workers.unwrap_or(0);
    if cli.workers == Some(0) {
        return Err(Error::Config("--workers must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let dir = pool.install(|| Run::new(cfg, out).execute(command))?;
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
