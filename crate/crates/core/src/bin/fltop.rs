use clap::Parser;

use fltop::cli::{self, Cli};

fn main() {
    if let Err(e) = cli::execute(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code(&e));
    }
}
