use clap::Parser;
use ctxmt_cli::commands::{run, Cli};

fn main() -> anyhow::Result<()> {
    run(Cli::parse())
}
