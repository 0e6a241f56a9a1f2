//! Study server. Participants authenticate with a pre-shared token, pass a
//! display check, rate training items and then batches. Images are served
//! byte-exactly and only while they are the participant's current item, and
//! no endpoint ever returns a submitted value.

pub mod api;
pub mod device;
pub mod study;

use std::net::SocketAddr;
use std::path::PathBuf;

pub use api::{router, AppState};
pub use device::DeviceProfile;
pub use study::{Study, StudyConfig};

pub const DATA_DIR_VAR: &str = "KONX_DATA_DIR";
pub const BIND_ADDR_VAR: &str = "KONX_BIND_ADDR";
pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("study data: {0}")]
    Study(String),
    #[error("protocol: {0}")]
    Protocol(#[from] xres_core::protocol::ProtocolError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub data_dir: PathBuf,
    pub bind: SocketAddr,
}

impl ServeConfig {
    /// From `KONX_DATA_DIR` (required) and `KONX_BIND_ADDR`.
    pub fn from_env() -> Result<Self, ServiceError> {
        let data_dir = std::env::var_os(DATA_DIR_VAR)
            .map(PathBuf::from)
            .ok_or_else(|| ServiceError::Config(format!("{DATA_DIR_VAR} is not set")))?;
        let bind = std::env::var(BIND_ADDR_VAR).unwrap_or_else(|_| DEFAULT_BIND_ADDR.to_string());
        let bind = bind
            .parse()
            .map_err(|e| ServiceError::Config(format!("{BIND_ADDR_VAR}={bind}: {e}")))?;
        Ok(ServeConfig { data_dir, bind })
    }
}

pub async fn serve(cfg: ServeConfig) -> Result<(), ServiceError> {
    let state = AppState::new(Study::load(&cfg.data_dir)?)?;
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, data_dir = %cfg.data_dir.display(), "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
