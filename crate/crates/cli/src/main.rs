use clap::Parser;

fn main() {
    let cli = chickface_cli::Cli::try_parse().unwrap_or_else(|e| e.exit());
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(f) = chickface_cli::run(cli) {
        eprintln!("{}", f.to_json());
        std::process::exit(f.exit_code());
    }
}
