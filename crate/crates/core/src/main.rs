use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use coverdet::cli::{run, Cli};

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("COVERDET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("COVERDET_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .context("cannot configure worker pool")
}

fn fail(err: &dyn std::fmt::Display) -> ExitCode {
    let msg = err.to_string().replace('\n', " ");
    eprintln!(
        "{}",
        serde_json::json!({ "level": "error", "message": msg })
    );
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        return fail(&format!("{e:#}"));
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
