use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cslq_cli::{cmd_check, cmd_compare, cmd_generate, cmd_oracle, cmd_solve, write_outputs, CheckSelection, CliError, Outcome, RunOptions, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "cslq", version, about = "Terminally constrained stochastic LQ control on a binary scenario tree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Instance file (JSON).
    config: PathBuf,
    /// Directory for the report, timing sidecar and CSV; the report goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-iteration table (requires --out).
    #[arg(long)]
    csv: bool,
    /// Skip certification of convexity and surjectivity.
    #[arg(long)]
    force: bool,
    /// Override the seed stored in the instance.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the augmented Lagrangian method.
    Solve(RunArgs),
    /// Solve the dense KKT system.
    Oracle(RunArgs),
    /// Report certificates without solving.
    Check {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        surjectivity: bool,
        #[arg(long)]
        rank: bool,
        #[arg(long)]
        convexity: bool,
    },
    /// Run both solvers and report their distance.
    Compare(RunArgs),
    /// Print a certified random instance.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn options(args: &RunArgs) -> Result<RunOptions, CliError> {
    if args.csv && args.out.is_none() {
        return Err(CliError::config("--csv requires --out"));
    }
    Ok(RunOptions { out: args.out.clone(), csv: args.csv, force: args.force, seed: args.seed })
}

fn emit(outcome: Outcome, args: &RunArgs) -> Result<i32, CliError> {
    match &args.out {
        Some(dir) => {
            let path = write_outputs(&outcome, &args.config, dir)?;
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("report: {}", path.display());
        }
        None => {
            for line in &outcome.summary {
                eprintln!("{line}");
            }
            print!("{}", outcome.report.to_json());
        }
    }
    Ok(outcome.exit_code)
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Solve(args) => emit(cmd_solve(&args.config, &options(&args)?)?, &args),
        Command::Oracle(args) => emit(cmd_oracle(&args.config, &options(&args)?)?, &args),
        Command::Compare(args) => emit(cmd_compare(&args.config, &options(&args)?)?, &args),
        Command::Check { run, surjectivity, rank, convexity } => {
            let selection = CheckSelection { surjectivity, rank, convexity };
            emit(cmd_check(&run.config, &options(&run)?, selection)?, &run)
        }
        Command::Generate { seed, out } => {
            let text = cmd_generate(seed)?;
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?,
                None => print!("{text}"),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
