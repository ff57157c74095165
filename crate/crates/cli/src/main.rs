use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod output;

use config::ConfigError;
use crowd_prefrl::exec::Exec;

#[derive(Parser, Debug)]
#[command(name = "crowd-prefrl", version, about = "Crowd-sourced preference RL experiments")]
struct Cli {
    /// TOML config; missing keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory. Defaults to out/<command>-<config hash prefix>.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Print the resolved config and exit without running.
    #[arg(long, global = true)]
    dry_run: bool,

    #[arg(long, global = true, value_enum, default_value_t = ExecArg::Auto)]
    exec: ExecArg,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExecArg {
    Auto,
    Sequential,
    Parallel,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Sample a crowd and label a query set.
    Simulate,
    /// Aggregate a label matrix with majority vote and SML.
    Aggregate,
    /// Minority-detection scenario: SML weights clustered by a 1-D GMM.
    Cluster,
    /// Crowd-size sweep of label errors.
    Sweep,
    /// Reward learning and policy optimization for every label source and run.
    Train,
    /// Summarize the final returns of completed training runs.
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Aggregate => "aggregate",
            Command::Cluster => "cluster",
            Command::Sweep => "sweep",
            Command::Train => "train",
            Command::Eval => "eval",
        }
    }
}

fn exec_of(arg: ExecArg) -> anyhow::Result<Exec> {
    match arg {
        ExecArg::Auto => Ok(Exec::default()),
        ExecArg::Sequential => Ok(Exec::Sequential),
        ExecArg::Parallel => Exec::all()
            .into_iter()
            .find(|e| e.name() == "parallel")
            .ok_or_else(|| ConfigError("built without the parallel feature".into()).into()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut resolved = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        resolved.config.seed = seed;
        resolved.provenance.insert("seed".into(), config::Provenance::User);
    }
    if cli.dry_run {
        print!("{}", resolved.to_toml()?);
        println!("# config hash {}", resolved.hash()?);
        return Ok(());
    }
    let exec = exec_of(cli.exec)?;
    let out = match cli.out {
        Some(dir) => dir,
        None => PathBuf::from("out").join(format!("{}-{}", cli.command.name(), &resolved.hash()?[..12])),
    };
    commands::dispatch(cli.command, &resolved, &out, exec)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
