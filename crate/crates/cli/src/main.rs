use clap::Parser;

fn main() {
    let cli = akd_cli::Cli::parse();
    if let Err(e) = akd_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
