use std::path::PathBuf;

use anyhow::Context;
use ck_service::{load_state, serve, ServiceFiles};
use clap::Parser;

/// Serve an impact index over HTTP/JSON.
#[derive(Parser)]
#[command(name = "ck-service", version)]
struct Args {
    /// Index file (with its `.vocab` and `.docids` sidecars).
    #[arg(long)]
    index: PathBuf,
    /// Refuse an index not built from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Default judgments for `/eval`.
    #[arg(long)]
    qrels: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let state = load_state(&ServiceFiles {
        index: args.index,
        checkpoint: args.checkpoint,
        qrels: args.qrels,
    })?;
    let listener = tokio::net::TcpListener::bind(&args.addr)
        .await
        .with_context(|| format!("binding {}", args.addr))?;
    serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
