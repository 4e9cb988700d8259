use clap::Parser;
use slc_service::cli::{run, Cli};

fn main() -> std::process::ExitCode {
    run(Cli::parse())
}
