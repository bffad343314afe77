//! Command-line front end for `cers-core`: configuration loading, subcommand
//! dispatch and the end-to-end synthetic pipeline.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod io;

pub use commands::pipeline::run_pipeline;
pub use commands::Ctx;
pub use config::RunConfig;
pub use error::{CliError, Result};

use cli::Cli;

/// Loads the configuration, resolves the seed and thread cap, and runs the
/// chosen subcommand.
pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve_seed(cli.seed)?;
    if let Some(t) = config::threads_from_env()? {
        if !cers_core::exec::init_thread_cap(t) {
            log::debug!("thread cap {t} not applied");
        }
    }
    let mut ctx = Ctx::new(cfg);
    commands::dispatch(&cli.command, &mut ctx)
}
