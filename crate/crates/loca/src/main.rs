use clap::Parser;

fn main() {
    let cli = loca::cli::Cli::parse();
    if let Err(err) = loca::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
