use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oryx_cli::commands::{self, CliError, CliResult, FlopsGrid};
use oryx_cli::config::RunConfig;
use oryx_cli::data::TaskKind;
use oryx_core::Precision;

#[derive(Parser)]
#[command(name = "oryx", version, about = "Shared attention / linear block experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured parameter precision.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured MQAR task; writes a checkpoint and metrics.
    Train(Common),
    /// Per-position NLL for single-mode baselines and mode-switch plans.
    SwitchCurve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Needle retrieval under all four context/prompt mode pairs.
    RetrievalEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Analytic cost table with C = D_k = D_v.
    Flops {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        chunks: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
    /// Writes synthetic sequences as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_kind, default_value = "mqar")]
        task: TaskKind,
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Prints a checkpoint header and tensor directory.
    InspectCheckpoint { path: PathBuf },
}

fn parse_kind(s: &str) -> Result<TaskKind, String> {
    match s {
        "mqar" => Ok(TaskKind::Mqar),
        "needle" => Ok(TaskKind::Needle),
        other => Err(format!("unknown task `{other}` (expected mqar or needle)")),
    }
}

fn resolve(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(p) = c.precision {
        cfg = cfg.with_precision(p);
    }
    if let Some(out) = &c.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => {
            let out = commands::run_train(&resolve(&c)?)?;
            println!("{}", out.checkpoint.display());
        }
        Command::SwitchCurve { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let curves = commands::run_switch_curve(&cfg, &checkpoint)?;
            println!("plan\tmean_nll");
            for c in curves {
                let vals: Vec<f64> = c.curve.raw.iter().flatten().copied().collect();
                println!("{}\t{:.4}", c.name, vals.iter().sum::<f64>() / vals.len().max(1) as f64);
            }
        }
        Command::RetrievalEval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            print!("{}", commands::format_retrieval(&commands::run_retrieval_eval(&cfg, &checkpoint)?));
        }
        Command::Flops { lengths, chunks, deltas } => {
            let d = FlopsGrid::default();
            let grid = FlopsGrid {
                lengths: lengths.unwrap_or(d.lengths),
                chunks: chunks.unwrap_or(d.chunks),
                deltas: deltas.unwrap_or(d.deltas),
            };
            print!("{}", commands::flops_table(&grid)?);
        }
        Command::GenData { common, task, start, count } => {
            let path = commands::run_gen_data(&resolve(&common)?, task, start, count)?;
            println!("{}", path.display());
        }
        Command::InspectCheckpoint { path } => print!("{}", commands::inspect_checkpoint(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
