use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use radar_core::cli::{cmd_experiment, cmd_gen, cmd_run, CommonArgs};
use radar_core::evalkit::{Experiment, ReportFormat};

#[derive(Parser)]
#[command(name = "radar", version, about = "Offline candidate store simulator and experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "radar.toml")]
    config: PathBuf,

    /// Output directory; defaults to the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Replace the configured seed(s) with this one.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Report format for experiment commands: csv or jsonl.
    #[arg(long, global = true)]
    format: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a world and write its snapshot.
    Gen,
    /// Simulate the horizon with the pipeline and online serving.
    Run,
    /// Recall of each retrieval source and of the stored lists.
    Table1,
    /// Model scaling x retrieval scaling grid.
    Table2,
    /// Recall by activity cohort.
    Table3,
    /// Two-tower recall as a function of K.
    Curve,
    /// Unique share of stored candidates with and without the freshness boost.
    Overlap,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let format = match cli.format.as_deref().map(str::parse::<ReportFormat>).transpose() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let args = CommonArgs {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        format,
    };
    let result = match cli.command {
        Command::Gen => cmd_gen(&args),
        Command::Run => cmd_run(&args),
        Command::Table1 => cmd_experiment(&args, Experiment::Table1),
        Command::Table2 => cmd_experiment(&args, Experiment::Table2),
        Command::Table3 => cmd_experiment(&args, Experiment::Table3),
        Command::Curve => cmd_experiment(&args, Experiment::Curve),
        Command::Overlap => cmd_experiment(&args, Experiment::Overlap),
    };
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
