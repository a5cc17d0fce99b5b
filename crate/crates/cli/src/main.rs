mod args;
mod commands;
mod config;
mod error;
mod fsutil;

use std::process::ExitCode;

use clap::Parser;
use log::error;

use args::{Cli, Command};
use config::RunConfig;
use error::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cli.common.apply(&mut cfg);
    cli.command.apply(&mut cfg);
    match cli.command {
        Command::BuildVocab(_) => commands::build_vocab(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Protocol(_) => commands::protocol(&cfg),
        Command::Predict(_) => commands::predict(&cfg),
        Command::Report(_) => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    // clap exits with 2 on usage errors and 0 for --help/--version
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
