use clap::Parser;

fn main() {
    let cli = probseq::cli::Cli::parse();
    if let Err(e) = probseq::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
