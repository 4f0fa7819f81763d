//! Discrete-event simulation of the federated network.

pub mod audit;
pub mod log;
pub mod queue;
pub mod setup;
pub mod sim;

pub use audit::{audit, AuditReport};
pub use log::{EventLog, EventRecord};
pub use queue::EventQueue;
pub use setup::{DelegationSpec, DeviceSpec, GatewaySpec, HandlingPolicy, ProtocolParams, SimSetup};
pub use sim::{run, RunMetrics, RunOutput, Simulator};
