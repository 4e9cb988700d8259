//! HTTP service, model-server clients and CLI for contract conversion.

pub mod api;
pub mod cli;
pub mod error;
pub mod remote;

pub use api::{router, AppState, ServiceConfig, TaggerSetting};
pub use error::ApiError;

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: std::sync::Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
