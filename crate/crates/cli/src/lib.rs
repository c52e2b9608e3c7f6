//! `pklbench` command-line front end.

pub mod args;
pub mod commands;
pub mod manifest;

use std::ffi::OsString;

use clap::Parser;
use pklbench_core::Error;

use crate::args::Cli;

/// Environment variable holding the log filter (`info`, `debug`, ...).
pub const LOG_ENV: &str = "PKLBENCH_LOG";

/// Stderr payload for failed runs.
pub fn error_json(e: &Error) -> serde_json::Value {
    let (kind, field) = match e {
        Error::Parse { path, .. } => ("parse", Some(path.clone())),
        Error::Version { .. } => ("version", Some("schema_version".to_string())),
        Error::Range { what, .. } => ("range", Some(what.clone())),
        Error::Dimension { what, .. } => ("dimension", Some(what.clone())),
        Error::Input(_) => ("input", None),
        Error::Config { field, .. } => ("config", Some(field.clone())),
        Error::Pairing(_) => ("pairing", None),
        Error::NonFinite { .. } => ("non_finite", None),
        Error::Io { path, .. } => ("io", Some(path.display().to_string())),
    };
    serde_json::json!({ "error": kind, "message": e.to_string(), "field": field })
}

/// Parses `argv` and runs the subcommand. Returns the process exit code:
/// 0 on success, 1 on runtime or config errors, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ =
        env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let words: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();

    let jobs = cli.command.jobs();
    let result = match jobs {
        Some(0) => Err(Error::config("jobs", "must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| commands::dispatch(&cli.command, &words, n > 1)),
            Err(e) => Err(Error::config("jobs", e.to_string())),
        },
        None => commands::dispatch(&cli.command, &words, true),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", error_json(&e));
            1
        }
    }
}
