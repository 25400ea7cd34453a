use clap::Parser;

use tribolens::cli::{error_json, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{}", error_json(&err));
        std::process::exit(err.exit_code());
    }
}
