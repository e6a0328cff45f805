//! `pixelfuse`: every pipeline stage as a subcommand that reads a config
//! and writes files.

mod commands;

use std::process::ExitCode;

use commands::{registry, CliError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let commands = registry();
    let mut app = clap::Command::new("pixelfuse")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Encoder-free unified text/image transformer on synthetic shapes")
        .subcommand_required(true)
        .after_long_help(commands::config_help());
    for c in &commands {
        app = app.subcommand(c.command());
    }
    let matches = match app.try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return fail(&CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cmd = commands.iter().find(|c| c.name() == name).expect("registered");
    match cmd.run(sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

/// One line on stderr: `error kind=<tag> message=<json string>`.
fn fail(e: &CliError) -> ExitCode {
    let msg = serde_json::to_string(&e.to_string()).unwrap_or_default();
    eprintln!("error kind={} message={msg}", e.kind());
    ExitCode::from(e.exit_code())
}
