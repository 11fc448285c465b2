mod args;
mod commands;
mod config;
mod error;

use std::io::Write;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use crate::args::Cli;
use crate::error::CliError;

const THREADS_ENV: &str = "PIFS_SCHED_THREADS";

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    pifs_sched::par::configure_threads(n);
    Ok(())
}

fn write_output(r: &commands::Rendered) -> Result<(), CliError> {
    match &r.out {
        Some(path) => std::fs::write(path, &r.text).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(r.text.as_bytes()).and_then(|_| out.flush()).map_err(|e| CliError::Io(format!("stdout: {e}")))
        }
    }
}

fn run(argv: Vec<String>) -> Result<(), CliError> {
    let cmd = Cli::command();
    let argv = config::expand(argv, &cmd)?;
    let matches = match cmd.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            // clap lists missing arguments on indented lines after the headline
            let msg = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.is_empty() && !l.starts_with("Usage:"))
                .collect::<Vec<_>>()
                .join(" ");
            let msg = if msg.is_empty() { "invalid arguments".to_string() } else { msg };
            return Err(CliError::Usage(msg.trim_start_matches("error: ").to_string()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string().trim().to_string()))?;
    configure_threads()?;
    let rendered = commands::run(cli.command)?;
    write_output(&rendered)
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("pifs-sched: error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
