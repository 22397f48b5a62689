use clap::Parser;

fn main() {
    let cli = gwnet::cli::Cli::parse();
    if let Err(e) = gwnet::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
