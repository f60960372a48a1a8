use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcfl::ErrorCategory;
use dcfl_cli::commands::{cmd_partition, cmd_report, cmd_run, cmd_sweep};
use dcfl_cli::config::{load_config, Config, DEFAULT_CONFIG};

/// Federated learning simulator with distribution-controlled client selection.
///
/// Settings come from a TOML file. Precedence, lowest first: built-in
/// defaults, the config file, `--set` overrides, then `--jobs` / `--out`.
/// Outputs go to `<run.out>/<config hash>/`.
///
/// Exit status: 0 success, 1 configuration error, 2 data error, 3 divergence.
#[derive(Parser)]
#[command(name = "dcfl", version, after_long_help = long_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML). Without it every key has its default.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set selection.m_dc=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for client updates (overrides run.jobs).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output root (overrides run.out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the training set and write federation.jsonl + manifest.json.
    #[command(after_long_help = long_help())]
    Partition(Common),
    /// One federated run: log.jsonl, summary.json, timing.json, model.ckpt.
    #[command(after_long_help = long_help())]
    Run(Common),
    /// Repeated runs over [sweep]: results.csv, cells.jsonl, delta.csv.
    #[command(after_long_help = long_help())]
    Sweep(Common),
    /// Delta table from an existing results.csv.
    Report {
        /// results.csv written by `sweep`
        results: PathBuf,
        /// Where to write the delta CSV.
        #[arg(short, long, default_value = "delta.csv")]
        out: PathBuf,
    },
    /// Print the resolved configuration and its hash.
    #[command(after_long_help = long_help())]
    ShowConfig(Common),
}

fn long_help() -> String {
    format!("Config keys and defaults:\n\n{DEFAULT_CONFIG}")
}

fn resolve(common: &Common) -> dcfl::Result<Config> {
    let mut cfg = load_config(common.config.as_deref(), &common.set)?;
    if let Some(j) = common.jobs {
        cfg.run.jobs = j;
    }
    if let Some(o) = &common.out {
        cfg.run.out = o.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> dcfl::Result<()> {
    match cli.command {
        Command::Partition(c) => {
            let dir = cmd_partition(&resolve(&c)?)?;
            println!("{}", dir.display());
        }
        Command::Run(c) => {
            let dir = cmd_run(&resolve(&c)?)?;
            println!("{}", dir.display());
        }
        Command::Sweep(c) => {
            let dir = cmd_sweep(&resolve(&c)?)?;
            println!("{}", dir.display());
        }
        Command::Report { results, out } => {
            cmd_report(&results, &out)?;
            println!("{}", out.display());
        }
        Command::ShowConfig(c) => {
            let cfg = resolve(&c)?;
            println!("# config hash {}\n{}", cfg.hash(), cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Divergence => 3,
            })
        }
    }
}
