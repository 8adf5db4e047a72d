//! Thin CLI over [`lmap::harness`]: parse flags, build the key=value
//! config, dispatch, print the report, map errors to exit codes
//! (0 ok, 2 config, 3 numeric, 4 acceptance-check failure).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lmap::harness::{self, KvConfig};

#[derive(Parser)]
#[command(
    name = "lmap",
    version,
    about = "Latent macro-action planner toolkit",
    after_help = "Commands: gen-data | train-codec | train-prior | eval | \
                  bench-preconstruct | ablate | heatmap | oracle-compare\n\
                  Config: --config file of key=value lines, overridden by --set key=value."
)]
struct Cli {
    /// Subcommand name.
    command: String,

    /// Config file: one key=value per line, `#` comments.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a single config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Root random seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,

    /// Primary output path (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads for episode-parallel evaluation.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: &Cli) -> lmap::Result<harness::CmdOutput> {
    let mut cfg = match &cli.config {
        Some(path) => KvConfig::from_file(path)?,
        None => KvConfig::new(),
    };
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string());
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.display().to_string());
    }
    if let Some(threads) = cli.threads {
        cfg.set("threads", &threads.to_string());
    }
    harness::run(&cli.command, &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            print!("{}", out.report);
            ExitCode::from(out.exit as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
