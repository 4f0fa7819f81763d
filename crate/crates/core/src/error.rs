use std::path::PathBuf;

use thiserror::Error;

use crate::ids::{ClusterId, GatewayId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("payload size {0} bytes outside [1, 230]")]
    PayloadSize(usize),

    #[error("spreading factor {0} outside SF7..SF12")]
    SpreadingFactor(u8),

    #[error("channel index {0} outside [0, 8)")]
    Channel(u8),

    #[error("invalid scenario: {0}")]
    Config(String),

    #[error("fair-use violation: {0}")]
    FairUse(String),

    #[error("cluster graph still disconnected after {0} attempts")]
    Disconnected(usize),

    #[error("no route from {from} to {to}")]
    NoRoute { from: ClusterId, to: ClusterId },

    #[error("routing integrity: {at} is not adjacent to {next}")]
    NotAdjacent { at: ClusterId, next: ClusterId },

    #[error("delegation already active for {0}")]
    DelegationActive(crate::ids::DevEui),

    #[error("gateway {0} holds no identity for the device")]
    NotOwner(GatewayId),

    #[error("empty result table")]
    EmptyTable,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
