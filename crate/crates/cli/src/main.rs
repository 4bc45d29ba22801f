use clap::Parser;
use pilotsim_cli::commands::{execute, Cli, EXIT_CONFIG};

fn main() {
    let cli = Cli::parse();
    let code = match execute(cli, &mut std::io::stdout().lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_CONFIG
        }
    };
    std::process::exit(code);
}
