use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

use commands::{Context, UsageError};
use nilm_core::architectures::{ArchitectureKind, TrainFailure};
use nilm_core::experiment::Profile;

#[derive(Debug, Parser)]
#[command(name = "nilm", version, about = "Neural energy disaggregation pipeline")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Paper)]
    profile: ProfileArg,
    /// Record wall-clock times in logs and reports (makes them non-reproducible).
    #[arg(long, global = true)]
    wallclock: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Lstm,
    Dae,
    Rectangles,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineArg {
    Co,
    Fhmm,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract appliance activations from every configured channel.
    Extract,
    /// Write a few training pairs for inspection.
    SynthPreview {
        #[arg(long)]
        appliance: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train one network for one appliance.
    Train {
        #[arg(long)]
        appliance: String,
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Overrides the update budget.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Estimate appliance power from aggregate data.
    Disaggregate {
        #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Manifest of the checkpoint; defaults to `manifest.json` beside it.
        #[arg(long, requires = "checkpoint")]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Single house; defaults to the configured test houses.
        #[arg(long)]
        house: Option<String>,
    },
    /// Score estimates against sub-metered ground truth.
    Evaluate {
        #[arg(long)]
        appliance: String,
        #[arg(long)]
        algorithm: String,
        #[arg(long)]
        house: Option<String>,
    },
    /// Combine every evaluation into one table.
    Report,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli
        .config
        .ok_or_else(|| UsageError("--config is required".into()))?;
    let profile = match cli.profile {
        ProfileArg::Paper => Profile::Paper,
        ProfileArg::Desk => Profile::Desk,
    };
    let ctx = Context::load(&config, cli.seed, profile, cli.wallclock)?;
    match cli.command {
        Command::Extract => commands::extract(&ctx),
        Command::SynthPreview { appliance, count } => commands::synth_preview(&ctx, &appliance, count),
        Command::Train { appliance, kind, budget } => {
            let kind = match kind {
                KindArg::Lstm => ArchitectureKind::Lstm,
                KindArg::Dae => ArchitectureKind::Dae,
                KindArg::Rectangles => ArchitectureKind::Rectangles,
            };
            commands::train(&ctx, &appliance, kind, budget)
        }
        Command::Disaggregate {
            checkpoint,
            manifest,
            baseline,
            house,
        } => match (checkpoint, baseline) {
            (Some(ck), _) => commands::disaggregate_network(&ctx, &ck, manifest.as_deref(), house.as_deref()),
            (None, Some(b)) => commands::disaggregate_baseline(&ctx, matches!(b, BaselineArg::Fhmm), house.as_deref()),
            (None, None) => Err(UsageError("give --checkpoint or --baseline".into()).into()),
        },
        Command::Evaluate {
            appliance,
            algorithm,
            house,
        } => commands::evaluate(&ctx, &appliance, &algorithm, house.as_deref()),
        Command::Report => commands::report(&ctx),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    let numeric = err.chain().any(|e| {
        e.downcast_ref::<nilm_core::Error>().is_some_and(nilm_core::Error::is_numeric)
            || e.downcast_ref::<TrainFailure>().is_some_and(|f| f.error.is_numeric())
    });
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
