use clap::Parser;

use hypsim::cli::{main_with, Cli};
use hypsim::schedulers::SchedulerRegistry;

fn main() {
    let cli = Cli::parse();
    std::process::exit(main_with(cli, &SchedulerRegistry::default()));
}
