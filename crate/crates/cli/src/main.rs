use std::process::ExitCode;

use clap::Parser;
use lksde_cli::cli::{Cli, Command};
use lksde_cli::commands;
use lksde_cli::server::{self, AppState, Snapshot};
use lksde_cli::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train_cmd(&a),
        Command::Predict(a) => commands::predict_cmd(&a).map(|_| ()),
        Command::Generate(a) => commands::generate_cmd(&a),
        Command::Sweep(a) => commands::sweep_cmd(&a).map(|_| ()),
        Command::Eval(a) => commands::eval_cmd(&a).map(|_| ()),
        Command::Serve(a) => {
            let snapshot = Snapshot::load(&a.model, &a.data).map_err(CliError::from)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(AppState::new(snapshot), a.addr))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
