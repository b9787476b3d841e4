use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcb_cli::{
    cmd_calibrate, cmd_eval, cmd_report, cmd_sweep, cmd_synth, cmd_train, parse_ms_variant, posthoc_options,
    Experiment, Overrides,
};
use pcb_core::trainer::Precision;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    #[value(name = "64")]
    P64,
    #[value(name = "32")]
    P32,
}

#[derive(Debug, Parser)]
#[command(name = "pcb", version, about = "Long-tailed classification experiments")]
struct Cli {
    /// Experiment spec (TOML).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or ingest the dataset and write a snapshot.
    Synth,
    /// Train and write checkpoint, epoch log and final report.
    Train,
    /// Evaluate a checkpoint on the validation partition.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare post-hoc calibrations of a checkpoint.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use argmax-vote confusion matrices instead of soft ones.
        #[arg(long)]
        hard: bool,
        /// Mean-score statistic: `original` or `modified`.
        #[arg(long, default_value = "original")]
        ms_variant: String,
    },
    /// Train once per value of a dotted spec key.
    Sweep {
        /// Dotted key, e.g. `loss.alpha`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Summarise the outputs already in the output directory.
    Report,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let Some(spec) = cli.spec else {
        anyhow::bail!("--spec is required");
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        precision: cli.precision.map(|p| match p {
            PrecisionArg::P64 => Precision::F64,
            PrecisionArg::P32 => Precision::F32,
        }),
    };
    let exp = Experiment::load(&spec, &overrides)?;
    match cli.command {
        Command::Synth => {
            let path = cmd_synth(&exp)?;
            println!("wrote {}", path.display());
        }
        Command::Train => {
            let r = cmd_train(&exp)?;
            println!(
                "acc {:.4} rare {:?} pwb {:.4} ({})",
                r.acc_overall,
                r.acc_rare,
                r.pwb,
                exp.config_hash()
            );
        }
        Command::Eval { checkpoint } => {
            let r = cmd_eval(&exp, &checkpoint)?;
            println!("acc {:.4} rare {:?} pwb {:.4}", r.acc_overall, r.acc_rare, r.pwb);
        }
        Command::Calibrate {
            checkpoint,
            hard,
            ms_variant,
        } => {
            let options = posthoc_options(hard, parse_ms_variant(&ms_variant)?);
            for row in cmd_calibrate(&exp, &checkpoint, options)? {
                println!(
                    "{:<5} {:<7} acc {:.4} rare {:?}",
                    row.method, row.source, row.report.acc_overall, row.report.acc_rare
                );
            }
        }
        Command::Sweep { param, values } => {
            for row in cmd_sweep(&exp, &param, &values)? {
                println!(
                    "{param}={} acc {:.4} rare {:?} pwb {:.4}",
                    row.value, row.report.acc_overall, row.report.acc_rare, row.report.pwb
                );
            }
        }
        Command::Report => {
            let path = cmd_report(&exp)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
