use clap::Parser;

fn main() {
    let cli = dlora_cli::Cli::parse();
    if let Err(e) = dlora_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
