//! `layoutforge` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or manifest error, 2 data error,
//! 3 gradient check failed.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use layoutforge::Error;

#[derive(Debug, Parser)]
#[command(name = "layoutforge", version, about = "Cross-attention layout guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Excite-and-separate loss of an attention snapshot.
    Loss1(Common),
    /// Adaptive threshold masks of an attention snapshot.
    Masks(Common),
    /// Plan the layout and migrate the latent.
    Rearrange(Common),
    /// Mask-following loss of an attention snapshot against given masks.
    Loss3(Common),
    /// Full guidance run on the toy attention model.
    Guide(Common),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run manifest (TOML).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the loss gradient with respect to the attention maps.
    #[arg(long)]
    pub emit_grad: bool,
}

/// Why a command stopped.
pub enum Failure {
    Usage(String),
    Data(String),
    /// The report of a failed gradient check.
    GradCheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Manifest(_) | Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAYOUTFORGE_LOG", "error"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Loss1(c) => commands::loss1(c),
        Command::Masks(c) => commands::masks(c),
        Command::Rearrange(c) => commands::rearrange(c),
        Command::Loss3(c) => commands::loss3(c),
        Command::Guide(c) => commands::guide(c),
        Command::Gradcheck(c) => commands::gradcheck(c),
    };
    match result {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::GradCheck(report)) => {
            print!("{report}");
            eprintln!("error: gradient check failed");
            ExitCode::from(3)
        }
    }
}
