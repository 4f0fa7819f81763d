//! End-device ownership and key administration with symbolic cryptography:
//! keys are opaque tokens and decryption is token possession.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ActorId, DevEui, GatewayId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyToken(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KeyKind {
    Network = 1,
    Application = 2,
}

/// Session key token for `(app_key, session_id, kind)`.
fn derive(app_key: KeyToken, session_id: u32, kind: KeyKind) -> KeyToken {
    let mut rng = ChaCha8Rng::seed_from_u64(app_key.0);
    rng.set_stream(u64::from(session_id) << 2 | kind as u64);
    KeyToken(rng.next_u64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceIdentity {
    pub dev_eui: DevEui,
    pub app_eui: u64,
    pub app_key: KeyToken,
}

impl DeviceIdentity {
    /// Identity with a root key drawn from `seed`.
    pub fn generate(dev_eui: DevEui, owner: ActorId, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(dev_eui.0));
        Self {
            dev_eui,
            app_eui: u64::from(owner.0),
            app_key: KeyToken(rng.next_u64()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionKeys {
    pub nwk_s_key: KeyToken,
    pub app_s_key: KeyToken,
    pub session_id: u32,
    pub valid_from: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyHolding {
    pub session_id: u32,
    pub token: KeyToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelegationState {
    /// Issued, waiting for the device's next join.
    Pending,
    /// Keys handed to the renter for this session.
    Active(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelegationContract {
    pub dev_eui: DevEui,
    pub owner: ActorId,
    pub renter: ActorId,
    pub renter_gateway: GatewayId,
    pub state: DelegationState,
    pub issued_at: f64,
    /// A pending contract lapses here if the device never joins.
    pub lapses_at: f64,
}

/// Application payload sealed under a session's app_s_key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedPayload {
    pub dev_eui: DevEui,
    pub session_id: u32,
    seal: KeyToken,
    blob: u64,
}

impl SealedPayload {
    pub fn seal(dev_eui: DevEui, keys: &SessionKeys, blob: u64) -> Self {
        Self {
            dev_eui,
            session_id: keys.session_id,
            seal: keys.app_s_key,
            blob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decrypted {
    Payload(u64),
    Opaque,
}

/// Session keys held by one gateway.
#[derive(Debug, Clone, Default)]
pub struct KeyRing {
    nwk: BTreeMap<DevEui, KeyHolding>,
    app: BTreeMap<DevEui, KeyHolding>,
}

impl KeyRing {
    pub fn install_nwk(&mut self, dev: DevEui, keys: &SessionKeys) {
        self.nwk.insert(
            dev,
            KeyHolding {
                session_id: keys.session_id,
                token: keys.nwk_s_key,
            },
        );
    }

    pub fn install_app(&mut self, dev: DevEui, keys: &SessionKeys) {
        self.app.insert(
            dev,
            KeyHolding {
                session_id: keys.session_id,
                token: keys.app_s_key,
            },
        );
    }

    pub fn revoke_nwk(&mut self, dev: DevEui) {
        self.nwk.remove(&dev);
    }

    pub fn revoke_app(&mut self, dev: DevEui) {
        self.app.remove(&dev);
    }

    pub fn nwk(&self, dev: DevEui) -> Option<KeyHolding> {
        self.nwk.get(&dev).copied()
    }

    pub fn app(&self, dev: DevEui) -> Option<KeyHolding> {
        self.app.get(&dev).copied()
    }

    /// Opens the payload iff this ring holds the current app_s_key token.
    pub fn decrypt_app_payload(&self, msg: &SealedPayload) -> Decrypted {
        match self.app.get(&msg.dev_eui) {
            Some(h) if h.session_id == msg.session_id && h.token == msg.seal => Decrypted::Payload(msg.blob),
            _ => Decrypted::Opaque,
        }
    }
}

/// What the owner produces when a join for one of its devices is matched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JoinGrant {
    pub keys: SessionKeys,
    pub handler: GatewayId,
    /// Renter gateway receiving the session keys, when a delegation activates.
    pub renter_gateway: Option<GatewayId>,
    /// A delegation that ended with this join.
    pub expired: Option<DelegationContract>,
}

/// Per-actor device administration.
#[derive(Debug, Clone)]
pub struct OwnerAdmin {
    pub actor: ActorId,
    identities: BTreeMap<DevEui, DeviceIdentity>,
    sessions: BTreeMap<DevEui, SessionKeys>,
    delegations: BTreeMap<DevEui, DelegationContract>,
}

impl OwnerAdmin {
    pub fn new(actor: ActorId) -> Self {
        Self {
            actor,
            identities: BTreeMap::new(),
            sessions: BTreeMap::new(),
            delegations: BTreeMap::new(),
        }
    }

    pub fn enroll(&mut self, identity: DeviceIdentity) {
        self.identities.insert(identity.dev_eui, identity);
    }

    pub fn owns(&self, dev: DevEui) -> bool {
        self.identities.contains_key(&dev)
    }

    pub fn session(&self, dev: DevEui) -> Option<&SessionKeys> {
        self.sessions.get(&dev)
    }

    pub fn delegation(&self, dev: DevEui) -> Option<&DelegationContract> {
        self.delegations.get(&dev)
    }

    /// Mints the next session for `dev`, handled by `handler`. A pending
    /// delegation activates; an active one from an earlier session expires.
    pub fn craft_join_accept(
        &mut self,
        owner_gateway: GatewayId,
        dev: DevEui,
        handler: GatewayId,
        now: f64,
    ) -> Result<JoinGrant> {
        let identity = self.identities.get(&dev).ok_or(Error::NotOwner(owner_gateway))?;
        let session_id = self.sessions.get(&dev).map_or(1, |k| k.session_id + 1);
        let keys = SessionKeys {
            nwk_s_key: derive(identity.app_key, session_id, KeyKind::Network),
            app_s_key: derive(identity.app_key, session_id, KeyKind::Application),
            session_id,
            valid_from: now,
        };
        self.sessions.insert(dev, keys);

        let mut renter_gateway = None;
        let mut expired = None;
        if let Some(contract) = self.delegations.get_mut(&dev) {
            match contract.state {
                DelegationState::Pending => {
                    contract.state = DelegationState::Active(session_id);
                    renter_gateway = Some(contract.renter_gateway);
                }
                DelegationState::Active(s) if s < session_id => {
                    expired = self.delegations.remove(&dev);
                }
                DelegationState::Active(_) => {}
            }
        }
        Ok(JoinGrant {
            keys,
            handler,
            renter_gateway,
            expired,
        })
    }

    /// Rents `dev` to `renter` for one join cycle.
    pub fn delegate(
        &mut self,
        dev: DevEui,
        renter: ActorId,
        renter_gateway: GatewayId,
        now: f64,
        ttl: f64,
    ) -> Result<DelegationContract> {
        if !self.owns(dev) {
            return Err(Error::Config(format!("{} does not own {dev}", self.actor)));
        }
        if self.delegations.contains_key(&dev) {
            return Err(Error::DelegationActive(dev));
        }
        let contract = DelegationContract {
            dev_eui: dev,
            owner: self.actor,
            renter,
            renter_gateway,
            state: DelegationState::Pending,
            issued_at: now,
            lapses_at: now + ttl,
        };
        self.delegations.insert(dev, contract);
        Ok(contract)
    }

    /// Drops pending contracts whose Subscribe expired before any join.
    pub fn lapse(&mut self, now: f64) -> Vec<DelegationContract> {
        let lapsed: Vec<DevEui> = self
            .delegations
            .values()
            .filter(|c| c.state == DelegationState::Pending && c.lapses_at <= now)
            .map(|c| c.dev_eui)
            .collect();
        lapsed.into_iter().filter_map(|d| self.delegations.remove(&d)).collect()
    }
}

/// Per-actor inventory used for configuration checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActorInventory {
    pub actor: ActorId,
    pub gateways: usize,
    pub devices: usize,
}

/// Every actor deploying end-devices must also deploy a gateway.
pub fn fair_use_check(registry: &[ActorInventory]) -> Vec<String> {
    registry
        .iter()
        .filter(|a| a.devices > 0 && a.gateways == 0)
        .map(|a| format!("{} deploys {} end-devices but no gateway", a.actor, a.devices))
        .collect()
}
