mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use config::{Cli, Command, RunConfig};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("QGEN_LOG", "warn")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = RunConfig::resolve(&cli.flags).and_then(|rc| match cli.command {
        Command::Synth => commands::synth(&rc),
        Command::Preprocess => commands::preprocess(&rc),
        Command::Parse => commands::parse(&rc),
        Command::Derive => commands::derive(&rc),
        Command::Train => commands::train(&rc),
        Command::Generate => commands::generate_cmd(&rc),
        Command::Baseline => commands::baseline(&rc),
        Command::Evaluate => commands::evaluate_cmd(&rc),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
