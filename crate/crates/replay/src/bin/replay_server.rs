use clap::Parser;
use replay::{Server, ServerConfig};
use std::path::PathBuf;

/// Replay server: hosts tables of prioritized items and serves them over
/// the length-prefixed binary protocol.
#[derive(Parser)]
#[command(name = "replay-server", version)]
struct Args {
    /// Path to the TOML server configuration. The REPLAY_LISTEN
    /// environment variable overrides the configured listen address.
    #[arg(long)]
    config: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = match ServerConfig::from_file(&args.config) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("failed to load {}: {e}", args.config.display());
            std::process::exit(1);
        }
    };
    let server = match Server::start(config) {
        Ok(server) => server,
        Err(e) => {
            eprintln!("failed to start: {e}");
            std::process::exit(1);
        }
    };
    log::info!("listening on {}", server.local_addr());
    loop {
        std::thread::park();
    }
}
