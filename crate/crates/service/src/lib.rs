//! HTTP inference over trained colorization checkpoints.
//!
//! Requests share the loaded weights read-only; registering a checkpoint
//! takes the registry's write lock only for the final insert.

pub mod api;
pub mod config;
pub mod registry;

use std::sync::Arc;

use candle_core::Device;

pub use api::{router, AppState, SharedState, VERSION};
pub use config::ServiceConfig;
pub use registry::{ModelInfo, Registry};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// State with every checkpoint in `config.checkpoint_dir` registered.
/// Files that fail to load are logged and skipped.
pub fn build_state(config: &ServiceConfig, device: Device) -> Result<SharedState, ServiceError> {
    let state = Arc::new(AppState::new(device));
    if let Some(dir) = &config.checkpoint_dir {
        for path in registry::checkpoint_files(dir)? {
            match state.register(&path) {
                Ok(id) => log::info!("loaded {} as {id}", path.display()),
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
    }
    Ok(state)
}

/// Binds and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = build_state(&config, Device::Cpu)?;
    let addr = config.addr()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "listening on {} with {} model(s)",
        listener.local_addr()?,
        state.registry.read().expect("registry lock").len()
    );
    axum::serve(listener, router(state, config.max_body_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
