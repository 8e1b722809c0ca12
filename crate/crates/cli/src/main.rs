use clap::Parser;

use seca_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = seca_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
