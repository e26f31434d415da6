use std::process::ExitCode;

use clap::{Parser, Subcommand};

use matchdiff_cli::commands::{cmd_ablate, cmd_eval, cmd_sample, cmd_synth, cmd_train, AblateArgs, EvalArgs, SampleArgs, SynthArgs, TrainArgs};
use matchdiff_cli::init_threads;

/// Diffusion search for point-cloud matching matrices.
#[derive(Debug, Parser)]
#[command(name = "matchdiff", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the encoder and denoiser on a dataset.
    Train(TrainArgs),
    /// Reverse-sample correspondences for every pair of a dataset.
    Sample(SampleArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Sweep one sampling setting and tabulate the metrics.
    Ablate(AblateArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("ERROR:usage: {first}");
            return ExitCode::from(2);
        }
    };
    init_threads();
    let result = match &cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ERROR:{}: {msg}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
