//! `mapseries`: fetch and ingest tile corpora, run series/parallel map
//! generation, and score the results.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mapseries::strategies::StrategyKind;

#[derive(Debug, Parser)]
#[command(
    name = "mapseries",
    version,
    about = "Multi-scale map generation over XYZ tile pyramids"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured strategy.
    #[arg(long, global = true)]
    pub strategy: Option<StrategyKind>,
    /// Override the zoom range, as `TOP:BOTTOM` (e.g. `17:13`).
    #[arg(long, global = true, value_parser = parse_zooms)]
    pub zooms: Option<(u8, u8)>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output format for reports and tables.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Structured,
    Svg,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Download tiles for the configured source regions.
    Fetch,
    /// Scan the corpus root and rewrite its manifest.
    Ingest,
    /// Build RM and MM training pairs.
    Pairs {
        /// Run directory whose generated tiles feed the MM pairs; real maps
        /// are used when absent.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a strategy and write its run directory.
    Translate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score run directories against the corpus maps.
    Evaluate {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for report.csv, report.json and trend.svg.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram EMD between strategy inputs and real maps, per zoom.
    Emd,
    /// Convert a CSV or JSON report, or render its trend chart.
    Report {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_zooms(s: &str) -> Result<(u8, u8), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected TOP:BOTTOM, got {s:?}"))?;
    let top: u8 = a.trim().parse().map_err(|_| format!("bad zoom {a:?}"))?;
    let bottom: u8 = b.trim().parse().map_err(|_| format!("bad zoom {b:?}"))?;
    if bottom > top {
        return Err(format!("bottom zoom {bottom} is above top zoom {top}"));
    }
    Ok((top, bottom))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match &cli.command {
        Command::Fetch => commands::fetch(g),
        Command::Ingest => commands::ingest(g),
        Command::Pairs { run, out } => commands::pairs(g, run.as_deref(), out.as_deref()),
        Command::Translate { out } => commands::translate(g, out.as_deref()),
        Command::Evaluate { runs, out } => commands::evaluate(g, runs, out.as_deref()),
        Command::Emd => commands::emd(g),
        Command::Report { input, out } => commands::report(g, input, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            for line in e.message().lines() {
                eprintln!("error: {line}");
            }
            ExitCode::from(e.code())
        }
    }
}
