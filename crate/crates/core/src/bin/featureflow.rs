use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use featureflow::cli;

#[derive(Parser)]
#[command(version, about = "Feature-flow cooperative detection experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep fusion modes and latencies, write report.csv and report.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the derivative estimator on roadside frames.
    TrainFlow {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Codec and pipeline throughput.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a prediction file against a ground-truth file.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(command: Command) -> featureflow::Result<String> {
    Ok(match command {
        Command::Simulate { config, out } => cli::cmd_simulate(&config, &out)?.to_csv(),
        Command::TrainFlow { config, out } => {
            let file = cli::cmd_train_flow(&config, &out)?;
            serde_json::to_string_pretty(&file.training)?
        }
        Command::Bench { config } => serde_json::to_string_pretty(&cli::cmd_bench(&config)?)?,
        Command::Eval { pred, gt, config } => serde_json::to_string_pretty(&cli::cmd_eval(&pred, &gt, &config)?)?,
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args.command) {
        Ok(text) => {
            println!("{}", text.trim_end());
            ExitCode::from(cli::EXIT_OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
