use clap::Parser;

fn main() {
    let cli = adaptloop_cli::cli::Cli::parse();
    std::process::exit(adaptloop_cli::cli::run(cli));
}
