//! Federated LoRaWAN gateway network: protocol overlays and a deterministic
//! discrete-event simulator.

pub mod admin;
pub mod consensus;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod ids;
pub mod intercluster;
pub mod membership;
pub mod pubsub;
pub mod radio;

pub use error::{Error, Result};
