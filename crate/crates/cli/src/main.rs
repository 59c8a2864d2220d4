//! `propot` command line.
//!
//! Failures print one JSON line on stderr,
//! `{"error":"data","code":3,"message":"..."}`, and exit with 2 (usage),
//! 3 (data) or 4 (numeric).

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::error::ErrorKind as ClapKind;
use clap::Parser;
use propot_core::ErrorKind;

use args::Cli;

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Data, message: message.into() }
    }

    pub fn code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    fn label(&self) -> &'static str {
        match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }

    fn emit(&self) -> ExitCode {
        let message = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        let line = serde_json::json!({ "error": self.label(), "code": self.code(), "message": message });
        eprintln!("{line}");
        ExitCode::from(self.code())
    }
}

impl From<propot_core::Error> for CliError {
    fn from(e: propot_core::Error) -> Self {
        Self { kind: e.kind(), message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ClapKind::DisplayHelp | ClapKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return CliError::usage(first.trim_start_matches("error: ")).emit();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.emit(),
    }
}
