use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use ebmmoe::cli::{exit_code, run, Cli};

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("EBMMOE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("EBMMOE_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
