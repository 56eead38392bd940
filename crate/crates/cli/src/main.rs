use clap::Parser;
use pursuit_cli::{dispatch, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    if let Err(err) = dispatch(&cli, &mut stdout.lock()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
