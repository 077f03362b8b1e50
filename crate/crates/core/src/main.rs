use clap::Parser;

fn main() {
    let cli = milgrain::cli::Cli::parse();
    let result = milgrain::cli::init_threads().and_then(|()| milgrain::cli::run(cli));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
