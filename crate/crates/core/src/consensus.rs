//! Handler election among the gateways that heard a join request, and
//! channel / spreading-factor placement of the elected device.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ids::{DevEui, GatewayId};
use crate::radio::{Channel, SensitivityTable, SpreadingFactor};

/// Ties closer than this are resolved by id / index.
const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreWeights {
    pub rssi: f64,
    pub occupation: f64,
    pub load: f64,
    /// RSSI normalisation interval.
    pub rssi_floor: f64,
    pub rssi_ceiling: f64,
    /// Handled-device count that normalises to 1.
    pub load_cap: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            rssi: 0.5,
            occupation: 0.3,
            load: 0.2,
            rssi_floor: -137.0,
            rssi_ceiling: -30.0,
            load_cap: 500.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandlerProposal {
    pub gateway_id: GatewayId,
    pub occupation: f64,
    pub rssi: f64,
    pub pending_load: u32,
}

pub fn score(p: &HandlerProposal, w: &ScoreWeights) -> f64 {
    let span = w.rssi_ceiling - w.rssi_floor;
    let rssi = ((p.rssi - w.rssi_floor) / span).clamp(0.0, 1.0);
    let load = (f64::from(p.pending_load) / w.load_cap).clamp(0.0, 1.0);
    w.rssi * rssi - w.occupation * p.occupation - w.load * load
}

/// Highest score wins; equal scores go to the lowest gateway id.
pub fn elect<'a>(proposals: impl IntoIterator<Item = &'a HandlerProposal>, w: &ScoreWeights) -> Option<GatewayId> {
    let mut best: Option<(GatewayId, f64)> = None;
    for p in proposals {
        let s = score(p, w);
        best = match best {
            None => Some((p.gateway_id, s)),
            Some((id, bs)) => {
                if s > bs + TIE_EPSILON || ((s - bs).abs() <= TIE_EPSILON && p.gateway_id < id) {
                    Some((p.gateway_id, s))
                } else {
                    Some((id, bs))
                }
            }
        };
    }
    best.map(|b| b.0)
}

/// One participant's state for one join attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusRound {
    pub dev_eui: DevEui,
    pub attempt: u32,
    pub own: GatewayId,
    pub proposals: BTreeMap<GatewayId, HandlerProposal>,
    pub round: u32,
    pub decided: Option<GatewayId>,
}

impl ConsensusRound {
    pub fn new(dev_eui: DevEui, attempt: u32, own: HandlerProposal) -> Self {
        let mut proposals = BTreeMap::new();
        proposals.insert(own.gateway_id, own);
        Self {
            dev_eui,
            attempt,
            own: own.gateway_id,
            proposals,
            round: 0,
            decided: None,
        }
    }

    pub fn participants(&self) -> BTreeSet<GatewayId> {
        self.proposals.keys().copied().collect()
    }

    pub fn absorb(&mut self, incoming: impl IntoIterator<Item = HandlerProposal>) {
        for p in incoming {
            self.proposals.entry(p.gateway_id).or_insert(p);
        }
    }

    /// Proposals to send in the next exchange round: the own one first, then
    /// everything relayed from others.
    pub fn outgoing(&mut self) -> Vec<HandlerProposal> {
        self.round += 1;
        self.proposals.values().copied().collect()
    }

    pub fn decide(&mut self, w: &ScoreWeights) -> GatewayId {
        let winner = elect(self.proposals.values(), w).unwrap_or(self.own);
        self.decided = Some(winner);
        winner
    }

    pub fn is_winner(&self) -> bool {
        self.decided == Some(self.own)
    }
}

/// A hearer taking part in a synchronous consensus: its proposal plus the
/// gateways it sends to (its kNN and random views).
#[derive(Debug, Clone)]
pub struct Participant {
    pub proposal: HandlerProposal,
    pub recipients: Vec<GatewayId>,
}

/// Runs `rounds` synchronous full-exchange rounds among `participants` and
/// returns each participant's decision. Messages to non-participants are
/// dropped, as such gateways ignore the join request.
pub fn handling_consensus(
    dev_eui: DevEui,
    participants: &[Participant],
    rounds: u32,
    w: &ScoreWeights,
) -> BTreeMap<GatewayId, GatewayId> {
    let mut state: BTreeMap<GatewayId, ConsensusRound> = participants
        .iter()
        .map(|p| (p.proposal.gateway_id, ConsensusRound::new(dev_eui, 0, p.proposal)))
        .collect();
    let routes: BTreeMap<GatewayId, &Vec<GatewayId>> = participants
        .iter()
        .map(|p| (p.proposal.gateway_id, &p.recipients))
        .collect();
    for _ in 0..rounds {
        let mut inbox: BTreeMap<GatewayId, Vec<HandlerProposal>> = BTreeMap::new();
        for (id, round) in state.iter_mut() {
            let out = round.outgoing();
            for to in routes[id].iter() {
                if *to != *id {
                    inbox.entry(*to).or_default().extend(out.iter().copied());
                }
            }
        }
        for (to, msgs) in inbox {
            if let Some(r) = state.get_mut(&to) {
                r.absorb(msgs);
            }
        }
    }
    state.iter_mut().map(|(id, r)| (*id, r.decide(w))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    Selfish,
    Altruist,
}

/// Shannon entropy in bits of the normalised distribution. An all-zero
/// vector has entropy 0.
pub fn entropy(occupation: &[f64]) -> f64 {
    let total: f64 = occupation.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -occupation
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let p = x / total;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Sum of the winner's and its neighbours' channel occupation.
pub fn aggregate_occupation(own: &[f64; Channel::COUNT], neighbors: &[[f64; Channel::COUNT]]) -> [f64; Channel::COUNT] {
    let mut agg = *own;
    for n in neighbors {
        for (a, v) in agg.iter_mut().zip(n) {
            *a += v;
        }
    }
    agg
}

fn least_occupied(occ: &[f64; Channel::COUNT]) -> Channel {
    let mut best = 0;
    for c in 1..Channel::COUNT {
        if occ[c] < occ[best] - TIE_EPSILON {
            best = c;
        }
    }
    Channel::new(best as u8).expect("index below channel count")
}

/// Selfish: the winner's own least-occupied channel. Altruist: the channel
/// whose extra load `projected` maximises the entropy of the aggregate
/// neighbourhood occupation. Ties go to the lowest index.
pub fn assign_channel(
    own: &[f64; Channel::COUNT],
    neighbors: &[[f64; Channel::COUNT]],
    projected: f64,
    mode: PlacementMode,
) -> Channel {
    match mode {
        PlacementMode::Selfish => least_occupied(own),
        PlacementMode::Altruist => {
            let agg = aggregate_occupation(own, neighbors);
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..Channel::COUNT {
                let mut trial = agg;
                trial[c] += projected;
                let h = entropy(&trial);
                if h > best.1 + TIE_EPSILON {
                    best = (c, h);
                }
            }
            Channel::new(best.0 as u8).expect("index below channel count")
        }
    }
}

/// Lowest SF that admits `rssi` with `margin_db`; SF12 when none does.
pub fn assign_sf(rssi: f64, sensitivity: &SensitivityTable, margin_db: f64) -> SpreadingFactor {
    sensitivity.lowest_sf(rssi, margin_db).unwrap_or(SpreadingFactor::SF12)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    pub channel: Channel,
    pub sf: SpreadingFactor,
    pub session_id: u32,
    pub since: f64,
}

/// Devices a gateway currently handles.
#[derive(Debug, Clone, Default)]
pub struct HandledSet {
    devices: BTreeMap<DevEui, Registration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterOutcome {
    Registered,
    /// A newer session is already registered.
    Stale,
}

impl HandledSet {
    /// Records the device unless a newer session is already held.
    pub fn register(&mut self, dev: DevEui, reg: Registration) -> RegisterOutcome {
        match self.devices.get(&dev) {
            Some(old) if old.session_id > reg.session_id => RegisterOutcome::Stale,
            _ => {
                self.devices.insert(dev, reg);
                RegisterOutcome::Registered
            }
        }
    }

    /// Drops the device if its registration is not newer than `session_id`.
    pub fn release(&mut self, dev: DevEui, session_id: u32) -> bool {
        if self.devices.get(&dev).is_some_and(|r| r.session_id <= session_id) {
            self.devices.remove(&dev);
            true
        } else {
            false
        }
    }

    pub fn get(&self, dev: DevEui) -> Option<&Registration> {
        self.devices.get(&dev)
    }

    pub fn contains(&self, dev: DevEui) -> bool {
        self.devices.contains_key(&dev)
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}
