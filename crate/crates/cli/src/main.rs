use clap::Parser;

fn main() {
    let args = lot_cli::cli::Args::parse();
    std::process::exit(lot_cli::cli::execute(args));
}
