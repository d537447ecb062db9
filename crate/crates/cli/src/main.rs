//! Batch command-line surface: dataset generation, training, evaluation,
//! augmentation visualization, gradient verification and the
//! chain-vs-combination bench.
//!
//! Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.

mod commands;
mod pgm;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advchain", version, about = "Adversarial chained data augmentation for 2D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(commands::GenDataArgs),
    /// Train a segmentation network (two-phase schedule).
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(commands::EvalArgs),
    /// Emit augmentation panels (input, augmented, predictions, pull-back).
    Augment(commands::AugmentArgs),
    /// Run the finite-difference verification suite.
    Gradcheck(commands::GradcheckArgs),
    /// Diversity counts and forward-pass/wall-time bench for the two
    /// adversarial strategies.
    BenchChain(commands::BenchChainArgs),
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(core_err) = err.downcast_ref::<advchain_core::Error>() {
        match core_err {
            advchain_core::Error::InvalidArgument(_) | advchain_core::Error::ShapeMismatch(_) => 2,
            advchain_core::Error::Numerical(_) => 3,
            advchain_core::Error::Io(_)
            | advchain_core::Error::CorruptData(_)
            | advchain_core::Error::Checkpoint(_) => 4,
        }
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        4
    } else {
        1
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Augment(args) => commands::augment(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
        Command::BenchChain(args) => commands::bench_chain(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {:#}", err);
            std::process::exit(exit_code_for(&err));
        }
    }
}
