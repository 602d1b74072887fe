use clap::Parser;

use cfd_core::cli::{execute, Cli};

fn main() -> anyhow::Result<()> {
    execute(Cli::parse())?;
    Ok(())
}
