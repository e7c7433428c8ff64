use clap::Parser;
use gyrocal_cli::args::Cli;
use gyrocal_cli::commands::run;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli.command) {
        eprintln!("error [{}]: {e}", e.kind());
        std::process::exit(e.exit_code());
    }
}
