mod commands;
mod config;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{FamilyArg, Feature, FileConfig, Mode, Preset};

/// Train attention GANs on index returns or option surfaces, then sample,
/// score and repair the generated paths.
#[derive(Parser)]
#[command(name = "tsgan", version)]
struct Cli {
    /// TOML file with defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a generator and discriminator; writes checkpoints and history.
    Train {
        /// Price CSV (`date,close`) in index mode, surface CSV in surface mode.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, value_enum)]
        feature: Option<Feature>,
        /// PCA component count for surfaces.
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Sample paths from a trained generator into `bundle.bin`.
    Generate {
        /// Generator checkpoint; defaults to `<out>/generator.ckpt`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Score a bundle against real data; writes `scores.json` and SVG plots.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<out>/bundle.bin`.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        delta: Option<usize>,
    },
    /// Replace arbitrageable surfaces by their closest arbitrage-free repair.
    RepairArbitrage {
        /// Surface CSV providing the strike and maturity grid.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Summarize the artifacts of a run directory into `report.md`.
    Report,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let out = cli.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("run"));
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let need_data = |data: Option<PathBuf>| {
        data.or_else(|| file.data.clone())
            .ok_or_else(|| anyhow::anyhow!("no data file given (use --data or `data` in the config)"))
    };
    match cli.command {
        Command::Train { data, mode, family, preset, feature, components, iterations } => {
            let args = commands::TrainArgs { data, mode, family, preset, feature, components, iterations };
            let cfg = commands::resolve_train(&file, args, cli.seed, cli.out)?;
            commands::train(&file, cfg)
        }
        Command::Generate { model, paths, length } => {
            let model = model.unwrap_or_else(|| out.join("generator.ckpt"));
            let n = paths.or(file.paths).unwrap_or(512);
            let t = length.or(file.length).unwrap_or(2560);
            commands::generate(&model, n, t, seed, &out).map(|_| ())
        }
        Command::Evaluate { data, bundle, mode, delta } => {
            let bundle = bundle.unwrap_or_else(|| out.join("bundle.bin"));
            commands::evaluate(&need_data(data)?, &bundle, mode.or(file.mode), delta.or(file.delta), &out).map(|_| ())
        }
        Command::RepairArbitrage { data, bundle } => {
            let bundle = bundle.unwrap_or_else(|| out.join("bundle.bin"));
            commands::repair(&need_data(data)?, &bundle, &out).map(|_| ())
        }
        Command::Report => commands::report(&out).map(|_| ()),
    }
}

/// Missing or unreadable files exit with 2, every other failure with 1.
fn exit_code(e: &anyhow::Error) -> u8 {
    let io = e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>().is_some() || matches!(c.downcast_ref::<tsgan::Error>(), Some(tsgan::Error::Io(_)))
    });
    if io {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
