use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use pursuit_live::{router, AppState, ServerConfig};

#[derive(Debug, Parser)]
#[command(name = "pursuit-live", version, about = "Play the pursuit-evasion game in a browser")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory with the browser client bundle.
    #[arg(long, default_value = "web/dist")]
    static_dir: PathBuf,
    /// Write an append-only log per session here.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Seconds a session waits for a disconnected player.
    #[arg(long, default_value_t = 60.0)]
    disconnect_grace: f64,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let state = AppState::new(ServerConfig {
        static_dir: args.static_dir,
        log_dir: args.log_dir,
        disconnect_grace: Duration::from_secs_f64(args.disconnect_grace.max(0.0)),
        ..ServerConfig::default()
    });
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
