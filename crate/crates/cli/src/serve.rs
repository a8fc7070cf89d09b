//! `fewloop serve`: runs the REST service until interrupted.

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context as _;
use fewloop_service::{Service, ServiceConfig, ServiceError};

use crate::error::usage;

/// Values given on the command line or through the environment; each one
/// overrides the config file.
#[derive(Debug)]
pub struct ServeArgs {
    pub addr: SocketAddr,
    pub config: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub forest: Option<PathBuf>,
    pub tau: Option<f64>,
    pub history: Option<usize>,
    pub encoder_dim: Option<usize>,
    pub max_run_batch: Option<usize>,
    pub async_training: bool,
}

pub fn config(args: &ServeArgs) -> anyhow::Result<ServiceConfig> {
    let mut config = match &args.config {
        None => ServiceConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("malformed config {}: {e}", p.display())))?
        }
    };
    if let Some(d) = &args.data_dir {
        config.data_dir = d.clone();
    }
    if let Some(f) = &args.forest {
        config.forest_path = Some(f.clone());
    }
    if let Some(t) = args.tau {
        config.tau = t;
    }
    if let Some(h) = args.history {
        config.history = h;
    }
    if let Some(d) = args.encoder_dim {
        config.encoder_dim = d;
    }
    if let Some(m) = args.max_run_batch {
        config.max_run_batch = m;
    }
    config.async_training |= args.async_training;
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

pub fn run(args: ServeArgs) -> anyhow::Result<()> {
    let config = config(&args)?;
    let service = match Service::open(config) {
        Ok(s) => Arc::new(s),
        Err(e @ ServiceError::Config(_)) => return Err(usage(e.to_string())),
        Err(e) => return Err(e).context("opening the data directory"),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting the runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .with_context(|| format!("cannot bind {}", args.addr))?;
        // Printed so callers binding port 0 learn the real address.
        println!("listening on {}", listener.local_addr()?);
        std::io::stdout().flush()?;
        fewloop_service::serve(service, listener, shutdown_signal())
            .await
            .context("server failed")
    })
}

async fn shutdown_signal() {
    let interrupt = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = interrupt => {}
        _ = terminate => {}
    }
    tracing::info!("shutting down");
}
