use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use zzedit::harness::{
    cmd_compare, cmd_edit, cmd_pivot, cmd_schedule, cmd_trace, ExperimentConfig,
};
use zzedit::{Error, Result};

#[derive(Parser)]
#[command(
    name = "zzedit",
    version,
    about = "Pivot search and ZigZag editing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON). Defaults describe the two-component testbed.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Testbed seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the inference noise schedule.
    Schedule,
    /// Locate the pivot for every testbed instance.
    Pivot,
    /// Run every configured method and record the edits.
    Edit,
    /// Run every configured method and tabulate metrics.
    Compare,
    /// Write baseline and ZigZag trajectories of one instance.
    Trace {
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.testbed.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    let exp = config.resolve()?;
    let out = exp.config.output_dir.clone();
    match cli.command {
        Command::Schedule => cmd_schedule(&exp, &out),
        Command::Pivot => cmd_pivot(&exp, &out),
        Command::Edit => cmd_edit(&exp, &out),
        Command::Compare => cmd_compare(&exp, &out),
        Command::Trace { instance } => cmd_trace(&exp, &out, instance),
    }
}

fn report_error(e: &Error) {
    let line = serde_json::json!({ "error": e.to_string(), "kind": e.kind() });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", serde_json::json!({ "error": first, "kind": "usage" }));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(paths) => {
            if !cli.quiet {
                for p in paths {
                    println!("{}", p.display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}
