use clap::Parser;

fn main() {
    let cli = icaf::cli::Cli::parse();
    std::process::exit(icaf::cli::run(cli));
}
