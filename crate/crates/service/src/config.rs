use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const ENV_HOST: &str = "TEXTCOLOR_HOST";
pub const ENV_PORT: &str = "TEXTCOLOR_PORT";
pub const ENV_CHECKPOINT_DIR: &str = "TEXTCOLOR_CHECKPOINT_DIR";

/// Longest accepted description, in characters.
pub const MAX_DESCRIPTION_CHARS: usize = 1024;

/// Service settings.
///
/// ```toml
/// host = "127.0.0.1"
/// port = 8080
/// checkpoint_dir = "runs/toy"   # every *.safetensors inside is registered at startup
/// max_body_bytes = 16777216
/// ```
///
/// `TEXTCOLOR_HOST`, `TEXTCOLOR_PORT` and `TEXTCOLOR_CHECKPOINT_DIR` override the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub checkpoint_dir: Option<PathBuf>,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint_dir: None,
            max_body_bytes: 16 << 20,
        }
    }
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies overrides from `lookup` (normally `std::env::var`).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        if let Some(host) = lookup(ENV_HOST) {
            self.host = host;
        }
        if let Some(port) = lookup(ENV_PORT) {
            self.port = port
                .trim()
                .parse()
                .map_err(|_| ServiceError::Config(format!("{ENV_PORT}={port:?} is not a port number")))?;
        }
        if let Some(dir) = lookup(ENV_CHECKPOINT_DIR) {
            self.checkpoint_dir = Some(dir.into());
        }
        Ok(())
    }

    pub fn from_env(&mut self) -> Result<(), ServiceError> {
        self.apply_env(|k| std::env::var(k).ok())
    }

    pub fn addr(&self) -> Result<SocketAddr, ServiceError> {
        use std::net::ToSocketAddrs;
        (self.host.as_str(), self.port)
            .to_socket_addrs()
            .map_err(|e| ServiceError::Config(format!("{}:{}: {e}", self.host, self.port)))?
            .next()
            .ok_or_else(|| ServiceError::Config(format!("{}:{} resolves to nothing", self.host, self.port)))
    }
}
