//! `swing`: calibration, smile implication and swing pricing from a run
//! config. Exit codes: 0 success, 1 config error, 2 data error, 3 numerical
//! failure.

mod artifacts;
mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::artifacts::OutDir;
use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "swing",
    version,
    about = "Local-vol commodity smiles and swing option pricing"
)]
struct Cli {
    /// Run config (TOML, or JSON with a .json extension).
    #[arg(long, global = true, default_value = "swing.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir` or `out/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Continuous,
    Bangbang,
}

impl Mode {
    fn label(self) -> &'static str {
        match self {
            Mode::Continuous => "continuous",
            Mode::Bangbang => "bangbang",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the local vol (and the mean reversion when `a_grid` is set).
    Calibrate,
    /// Model smiles for several delivery periods.
    ImplySmile {
        /// Comma-separated delivery labels; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        deliveries: Vec<String>,
    },
    /// Swing price by least-squares Monte Carlo.
    PriceLsmc {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Swing price by a trained PPO agent.
    PricePpo {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        restarts: Option<usize>,
        /// Training episodes per restart.
        #[arg(long)]
        episodes: Option<usize>,
        /// Value-loss weight.
        #[arg(long)]
        beta: Option<f64>,
        /// Dump the greedy policy on the given fixing day.
        #[arg(long, value_name = "DAY")]
        policy_surface: Option<u32>,
    },
    /// Martingale, grid and PDE checks.
    Diagnose,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::ImplySmile { .. } => "imply-smile",
            Command::PriceLsmc { .. } => "price-lsmc",
            Command::PricePpo { .. } => "price-ppo",
            Command::Diagnose => "diagnose",
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mode = match &cli.command {
        Command::PriceLsmc { mode } | Command::PricePpo { mode, .. } => mode.map(Mode::label),
        _ => None,
    };
    if let (Some(m), Some(contract)) = (mode, cfg.contract.as_ref()) {
        cfg.contract = Some(commands::with_mode(contract, Some(m))?);
    }
    if let Command::PricePpo {
        restarts,
        episodes,
        beta,
        ..
    } = &cli.command
    {
        let t = &mut cfg.ppo.train;
        t.restarts = restarts.unwrap_or(t.restarts);
        t.episodes = episodes.unwrap_or(t.episodes);
        t.value_coef = beta.unwrap_or(t.value_coef);
    }
    if let Command::ImplySmile { deliveries } = &cli.command {
        if !deliveries.is_empty() {
            cfg.smile.deliveries = deliveries.clone();
        }
    }
    cfg.validate()?;
    let name = cli.command.name();
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_deref().map(|p| cfg.resolve(p)))
        .unwrap_or_else(|| PathBuf::from("out").join(name));
    let mut out = OutDir::create(&dir, artifacts::RunMeta::new(name, &cfg))?;
    log::info!("{name}: seed {} config {}", out.meta().seed, out.meta().config_sha256);
    match &cli.command {
        Command::Calibrate => commands::calibrate(&cfg, &mut out)?,
        Command::ImplySmile { .. } => {
            let deliveries = cfg.smile.deliveries.clone();
            commands::imply_smile(&cfg, &deliveries, &mut out)?
        }
        Command::PriceLsmc { .. } => commands::price_lsmc(&cfg, &mut out)?,
        Command::PricePpo { policy_surface, .. } => commands::price_ppo(&cfg, *policy_surface, &mut out)?,
        Command::Diagnose => commands::diagnose(&cfg, &mut out)?,
    }
    for p in out.written() {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("swing: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
