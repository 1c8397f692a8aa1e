use clap::Parser;
use plume::CliError;

fn main() {
    let cli = plume::Cli::parse();
    match plume::run(cli) {
        Ok(()) => {}
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(3);
        }
    }
}
