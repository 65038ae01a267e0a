use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ptl_cli::commands::{cmd_distill, cmd_eval, cmd_gradcheck, cmd_inspect_state, cmd_train, Invocation};
use ptl_cli::{CliError, RunConfig};
use ptl_core::DType;

#[derive(Parser, Debug)]
#[command(name = "ptl", version, about = "Train, evaluate and distill BConv-Cell PTL networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Checkpoint to start from (train, distill) or to load (eval, inspect-state).
    #[arg(long, global = true, visible_alias = "checkpoint")]
    init: Option<PathBuf>,

    /// Teacher checkpoint for distill.
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    dtype: Option<DType>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    Train,
    Eval,
    Distill,
    Gradcheck,
    InspectState,
}

fn invocation(cli: &Cli) -> Result<Invocation, CliError> {
    let mut config = match &cli.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dtype) = cli.dtype {
        config.dtype = dtype;
    }
    config.validate()?;
    Ok(Invocation {
        config,
        init: cli.init.clone(),
        teacher: cli.teacher.clone(),
        out: cli.out.clone(),
    })
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let inv = invocation(cli)?;
    match cli.command {
        Command::Train => {
            let o = cmd_train(&inv)?;
            if let Some(last) = o.report.rows().last() {
                println!(
                    "epoch {} loss {:.6} train_acc {:.4} eval_acc {:.4}",
                    last.epoch,
                    last.loss,
                    last.train_acc,
                    last.eval_acc.unwrap_or(f64::NAN)
                );
            }
            println!("checkpoint {}", o.checkpoint.display());
            println!("metrics {}", o.metrics.display());
        }
        Command::Eval => {
            let o = cmd_eval(&inv)?;
            println!("accuracy {:.6}", o.evaluation.accuracy());
            println!("report {}", o.csv.display());
        }
        Command::Distill => {
            for r in cmd_distill(&inv)? {
                let acc = r.report.rows().last().and_then(|row| row.eval_acc).unwrap_or(f64::NAN);
                println!("lambda {} eval_acc {acc:.4} checkpoint {}", r.lambda, r.checkpoint.display());
            }
        }
        Command::Gradcheck => {
            let o = cmd_gradcheck(&inv)?;
            for (suite, r) in &o.rows {
                println!(
                    "{:<5} {suite}/{} max_rel_error {:.3e} probes {}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.label,
                    r.max_rel_error,
                    r.probes
                );
            }
            println!("report {}", o.csv.display());
            if !o.passed() {
                return Err(CliError::GradCheck(o.failures().join(", ")));
            }
        }
        Command::InspectState => {
            let (rows, csv) = cmd_inspect_state(&inv)?;
            println!("{} state rows", rows.len());
            println!("report {}", csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
