use clap::Parser;

fn main() {
    let cli = pinc_cli::Cli::parse();
    std::process::exit(pinc_cli::run(cli));
}
