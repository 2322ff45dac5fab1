use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod options;

use options::{CalibrateOpts, EvalOpts, FixtureOpts, SearchOpts, VerifyOpts};

#[derive(Parser, Debug)]
#[command(name = "blockquant", version, about = "Post-training quantization by block reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a model against a calibration set.
    Calibrate(CalibrateOpts),
    /// Search per-layer bit widths under a hardware budget.
    Search(SearchOpts),
    /// Accuracy, loss and size of a model on a labeled dataset.
    Eval(EvalOpts),
    /// Check the Gauss-Newton output-space identity on a converged model.
    Verify(VerifyOpts),
    /// Build the toy models and synthetic datasets.
    MakeFixtures(FixtureOpts),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use blockquant::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Load { .. }) => 2,
        Some(E::Infeasible { .. }) => 3,
        Some(E::Numeric(_) | E::Diverged { .. }) => 4,
        Some(E::Precondition(_) | E::Scale(_)) => 5,
        _ => 1,
    }
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
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::Calibrate(o) => commands::calibrate(o),
        Command::Search(o) => commands::search(o),
        Command::Eval(o) => commands::eval(o),
        Command::Verify(o) => commands::verify(o),
        Command::MakeFixtures(o) => commands::make_fixtures(o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
