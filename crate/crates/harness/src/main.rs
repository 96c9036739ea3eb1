use std::path::PathBuf;
use std::process::ExitCode;

use affiner_harness::commands::{load_config, run};
use affiner_harness::config::Command;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "affiner-cli", version, about = "Pretrain, adapt, sample and inspect toy diffusion models with Affiner adapters")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every backbone parameter on the configured dataset.
    Pretrain(Common),
    /// Train adapters for each task on a frozen checkpoint.
    Adapt(Common),
    /// Draw samples from a checkpoint, optionally through an adapter file.
    Sample(Common),
    /// Compare adapter variants and ranks under one budget.
    Ablate(Common),
    /// Print per-layer parameter counts.
    Count {
        #[command(flatten)]
        common: Common,
        /// Preset name or architecture file.
        #[arg(long)]
        arch: Option<String>,
        /// affiner, lora or bias-only.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        d_rank: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, common) = match &cli.command {
        Cmd::Pretrain(c) => (Command::Pretrain, c),
        Cmd::Adapt(c) => (Command::Adapt, c),
        Cmd::Sample(c) => (Command::Sample, c),
        Cmd::Ablate(c) => (Command::Ablate, c),
        Cmd::Count { common, .. } => (Command::Count, common),
    };
    let result = load_config(command, common.config.as_deref()).and_then(|mut config| {
        if let Some(s) = common.seed {
            config.seed = s;
        }
        if let Some(o) = &common.out {
            config.out = o.clone();
        }
        if let Cmd::Count { arch, method, d_rank, .. } = &cli.command {
            if let Some(a) = arch {
                config.arch = a.clone();
            }
            if let Some(m) = method {
                config.method = m.clone();
            }
            if d_rank.is_some() {
                config.d_rank = *d_rank;
            }
        }
        run(&config)
    });
    match result {
        Ok(report) => {
            for line in &report.lines {
                println!("{line}");
            }
            println!("wrote {}", report.dir.join("manifest.txt").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
