mod args;
mod commands;
mod manifest;
mod report;

use clap::Parser;

use args::{Cli, Command};
use commands::Timer;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let timer = Timer::new(cli.record_timing);
    let res = match &cli.command {
        Command::Fit(a) => commands::fit(a, &timer),
        Command::Gof(a) => commands::gof(a, &timer),
        Command::Simulate(a) => commands::simulate(a, &timer),
        Command::Replicate(a) => commands::replicate(a, &timer),
    };
    if let Err(e) = res {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
