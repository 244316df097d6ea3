use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pointfuse::autograd::Fault;
use pointfuse_cli::commands::{
    cmd_dataset, cmd_eval, cmd_reconstruct, cmd_tokenize, cmd_train, DatasetArgs, EvalArgs, ReconstructArgs,
    TokenizeArgs, TrainArgs,
};
use pointfuse_cli::{exit_code, selftest};

/// Masked point-cloud reconstruction with image fusion.
#[derive(Debug, Parser)]
#[command(name = "pointfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize paired point clouds and depth images.
    Dataset(DatasetArgs),
    /// Group and mask one cloud and write the pieces as .xyz files.
    Tokenize(TokenizeArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Reconstruct one masked cloud from a checkpoint.
    Reconstruct(ReconstructArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the fast invariant suite.
    Selftest {
        /// Negate one backward rule so the gradient checks must fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Dataset(a) => cmd_dataset(a),
        Command::Tokenize(a) => cmd_tokenize(a),
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selftest { inject_fault } => {
            let fault = inject_fault.then_some(Fault::FlipMatmulGrad);
            println!("# resolved config");
            println!("inject_fault = {inject_fault}");
            let outcomes = selftest::run(fault);
            for o in &outcomes {
                println!("{}", o.line());
            }
            let failed = outcomes.iter().filter(|o| !o.passed()).count();
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            return ExitCode::from(u8::from(failed > 0));
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
