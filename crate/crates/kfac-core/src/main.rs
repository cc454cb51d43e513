use clap::Parser;
use kfac_core::cli::{run, Cli};

fn main() {
    let args = Cli::parse();
    if let Err(e) = run(&args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
