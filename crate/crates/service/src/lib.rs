//! REST service for the active few-shot annotation loop.
//!
//! A client registers a pool of texts, creates a model over it (zero-shot
//! from label descriptions, or trained on seed examples), then alternates
//! between requesting a batch of instances to annotate and uploading the
//! annotations. Every update retrains the model from scratch on the full
//! ledger and records the convergence signals; `evaluate` returns that
//! history and, when a stopping predictor is configured, a stop estimate.
//!
//! The endpoint payloads are documented in `docs/api-schema.json`.

mod api;
mod config;
mod error;
mod model;
mod pool;
mod service;
mod store;
pub mod types;

pub use api::{router, ROUTES};
pub use config::ServiceConfig;
pub use error::{ErrorBody, Result, ServiceError};
pub use model::{LedgerEntry, ModelMeta, DEFAULT_K};
pub use pool::pool_id;
pub use service::{load_forest, Service, UpdateOutcome};

use std::future::Future;
use std::sync::Arc;

use tokio::net::TcpListener;

/// Serves on `listener` until `shutdown` resolves.
pub async fn serve(
    service: Arc<Service>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
