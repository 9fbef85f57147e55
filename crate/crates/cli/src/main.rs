use std::process::ExitCode;

use anyhow::Context as _;
use clap::Parser;
use kltrace_cli::app::{self, Cli};
use serde_json::json;

fn report(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message, "exit_code": code}}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => return report("config", e.to_string().trim().to_string(), 2),
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let name = cli.command.name();
    let result = app::run(cli).with_context(|| format!("{name} failed"));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => match e.downcast_ref::<kltrace_core::Error>() {
            Some(core) => report(core.kind(), format!("{e:#}"), app::exit_code(core)),
            None => report("internal", format!("{e:#}"), 1),
        },
    }
}
