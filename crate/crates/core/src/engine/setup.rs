//! Fully resolved simulation input: every entity placed, every parameter set.

use serde::{Deserialize, Serialize};

use crate::consensus::{PlacementMode, ScoreWeights};
use crate::ids::{ActorId, ClusterId, DevEui, GatewayId, Position};
use crate::intercluster::ClusterGraph;
use crate::membership::MembershipParams;
use crate::pubsub::PubSubParams;
use crate::radio::{PathModel, PhyParams, SensitivityTable};

/// Who picks the handler of a joining device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandlingPolicy {
    /// A network server of the owning actor picks the strongest clean hearer
    /// among that actor's gateways, immediately at the end of the frame.
    Centralized,
    /// Hearers holding a matching Subscribe run the handling consensus.
    Federated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    pub consensus_rounds: u32,
    /// Sim-time per consensus exchange round.
    pub round_time: f64,
    /// Link margin in dB when choosing the data SF.
    pub sf_margin_db: f64,
    pub rx1_delay: f64,
    pub rx2_delay: f64,
    /// Gateway downlink duty cycle.
    pub gateway_duty: f64,
    pub backoff_base: f64,
    pub backoff_cap: f64,
    /// Relative jitter on each backoff, e.g. 0.2 for ±20%.
    pub backoff_jitter: f64,
    pub leader_period: f64,
    pub occupancy_window: f64,
    pub intra_latency: f64,
    pub inter_latency: f64,
    pub tx_power_dbm: f64,
    /// Application bytes of join requests and join accepts.
    pub join_payload: usize,
    /// Payload and period a handler assumes when projecting a new device's
    /// channel load.
    pub expected_payload: usize,
    pub expected_period: f64,
    pub housekeeping_period: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            consensus_rounds: 2,
            round_time: 0.25,
            sf_margin_db: 2.0,
            rx1_delay: 5.0,
            rx2_delay: 6.0,
            gateway_duty: 0.10,
            backoff_base: 30.0,
            backoff_cap: 480.0,
            backoff_jitter: 0.2,
            leader_period: 300.0,
            occupancy_window: 600.0,
            intra_latency: 0.0,
            inter_latency: 0.05,
            tx_power_dbm: 14.0,
            join_payload: 1,
            expected_payload: 26,
            expected_period: 330.0,
            housekeeping_period: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatewaySpec {
    pub id: GatewayId,
    pub position: Position,
    pub actor: ActorId,
    pub cluster: ClusterId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub dev_eui: DevEui,
    pub owner: ActorId,
    pub owner_gateway: GatewayId,
    pub position: Position,
    pub payload_size: usize,
    pub uplink_period: f64,
    pub rejoin_period: f64,
    pub duty_limit: f64,
    /// Time of the first join request.
    pub first_wake: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelegationSpec {
    pub dev_eui: DevEui,
    pub renter: ActorId,
    pub renter_gateway: GatewayId,
    pub at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSetup {
    pub seed: u64,
    pub duration: f64,
    pub policy: HandlingPolicy,
    pub placement: PlacementMode,
    pub gateways: Vec<GatewaySpec>,
    pub devices: Vec<DeviceSpec>,
    pub graph: ClusterGraph,
    pub delegations: Vec<DelegationSpec>,
    pub phy: PhyParams,
    pub path: PathModel,
    pub sensitivity: SensitivityTable,
    pub membership: MembershipParams,
    pub pubsub: PubSubParams,
    pub weights: ScoreWeights,
    pub protocol: ProtocolParams,
}
