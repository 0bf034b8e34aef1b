use clap::Parser;

fn main() {
    let cli = bsde_control::cli::Cli::parse();
    std::process::exit(bsde_control::cli::run(cli));
}
