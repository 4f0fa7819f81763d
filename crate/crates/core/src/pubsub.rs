//! Deployment management: expiring Subscribe requests spread through the
//! local cluster, Publish announcements raised by join requests, and exact
//! DevEUI matching between the two.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{DevEui, GatewayId, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PubSubParams {
    pub subscribe_ttl: f64,
    pub publish_horizon: f64,
    pub fanout: usize,
    pub hop_budget: u32,
    pub sweep_period: f64,
}

impl Default for PubSubParams {
    fn default() -> Self {
        Self {
            subscribe_ttl: 24.0 * 3600.0,
            publish_horizon: 3600.0,
            fanout: 4,
            hop_budget: 5,
            sweep_period: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubscribeRecord {
    pub dev_eui: DevEui,
    pub owner_gateway: GatewayId,
    pub renter_gateway: Option<GatewayId>,
    pub created_at: f64,
    pub expires_at: f64,
    pub request_id: RequestId,
}

impl SubscribeRecord {
    /// Validity ends at `expires_at`, exclusive.
    pub fn is_live(&self, now: f64) -> bool {
        self.expires_at > now
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishRecord {
    pub dev_eui: DevEui,
    pub hearing_gateway: GatewayId,
    pub rssi: f64,
    pub created_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ack {
    Stored,
    Seen,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubscribeOutcome {
    /// No Publish held yet: spread the request.
    Disseminate,
    /// A Publish for the device is already held locally.
    Matched(PublishRecord),
}

/// Per-gateway Publish/Subscribe memory.
#[derive(Debug, Clone)]
pub struct PubSubStore {
    gateway: GatewayId,
    counter: u32,
    subscribes: BTreeMap<RequestId, SubscribeRecord>,
    by_device: BTreeMap<DevEui, BTreeSet<RequestId>>,
    seen: BTreeSet<RequestId>,
    publishes: BTreeMap<DevEui, PublishRecord>,
}

impl PubSubStore {
    pub fn new(gateway: GatewayId) -> Self {
        Self {
            gateway,
            counter: 0,
            subscribes: BTreeMap::new(),
            by_device: BTreeMap::new(),
            seen: BTreeSet::new(),
            publishes: BTreeMap::new(),
        }
    }

    fn store(&mut self, record: SubscribeRecord) {
        self.seen.insert(record.request_id);
        self.by_device
            .entry(record.dev_eui)
            .or_default()
            .insert(record.request_id);
        self.subscribes.insert(record.request_id, record);
    }

    /// Issues a Subscribe for `dev_eui`, valid for `ttl` seconds.
    pub fn subscribe(
        &mut self,
        dev_eui: DevEui,
        ttl: f64,
        renter: Option<GatewayId>,
        now: f64,
    ) -> (SubscribeRecord, SubscribeOutcome) {
        assert!(ttl > 0.0, "subscribe ttl must be positive");
        let request_id = RequestId {
            issuer: self.gateway,
            counter: self.counter,
        };
        self.counter += 1;
        let record = SubscribeRecord {
            dev_eui,
            owner_gateway: self.gateway,
            renter_gateway: renter,
            created_at: now,
            expires_at: now + ttl,
            request_id,
        };
        self.store(record);
        let outcome = match self.publishes.get(&dev_eui) {
            Some(p) => SubscribeOutcome::Matched(*p),
            None => SubscribeOutcome::Disseminate,
        };
        (record, outcome)
    }

    /// Handles a forwarded Subscribe: stores unseen live records.
    pub fn receive(&mut self, record: SubscribeRecord, now: f64) -> Ack {
        if self.seen.contains(&record.request_id) {
            Ack::Seen
        } else if !record.is_live(now) {
            Ack::Expired
        } else {
            self.store(record);
            Ack::Stored
        }
    }

    pub fn has_seen(&self, id: RequestId) -> bool {
        self.seen.contains(&id)
    }

    /// Newest live Subscribe for the device.
    pub fn matching(&self, dev_eui: DevEui, now: f64) -> Option<&SubscribeRecord> {
        self.by_device
            .get(&dev_eui)?
            .iter()
            .filter_map(|id| self.subscribes.get(id))
            .filter(|r| r.is_live(now))
            .max_by(|a, b| {
                a.created_at
                    .total_cmp(&b.created_at)
                    .then(a.request_id.cmp(&b.request_id))
            })
    }

    /// Raises a Publish for a received join request and reports the matching
    /// Subscribe, if any.
    pub fn on_join_request(&mut self, dev_eui: DevEui, rssi: f64, now: f64) -> Option<SubscribeRecord> {
        self.publishes.insert(
            dev_eui,
            PublishRecord {
                dev_eui,
                hearing_gateway: self.gateway,
                rssi,
                created_at: now,
            },
        );
        self.matching(dev_eui, now).copied()
    }

    pub fn publish(&self, dev_eui: DevEui) -> Option<&PublishRecord> {
        self.publishes.get(&dev_eui)
    }

    pub fn subscribe_count(&self) -> usize {
        self.subscribes.len()
    }

    pub fn records(&self) -> impl Iterator<Item = &SubscribeRecord> {
        self.subscribes.values()
    }

    /// Removes expired Subscribes and Publishes older than `publish_horizon`.
    pub fn expiry_sweep(&mut self, now: f64, publish_horizon: f64) -> usize {
        let expired: Vec<RequestId> = self
            .subscribes
            .values()
            .filter(|r| !r.is_live(now))
            .map(|r| r.request_id)
            .collect();
        for id in &expired {
            if let Some(r) = self.subscribes.remove(id) {
                if let Some(set) = self.by_device.get_mut(&r.dev_eui) {
                    set.remove(id);
                    if set.is_empty() {
                        self.by_device.remove(&r.dev_eui);
                    }
                }
            }
        }
        let before = self.publishes.len();
        self.publishes.retain(|_, p| now - p.created_at < publish_horizon);
        expired.len() + before - self.publishes.len()
    }
}

/// Sender side of one local dissemination. Each round contacts up to
/// `fanout` view members that have not been contacted yet; the process goes
/// cold once every view member has answered, or when the hop budget is spent.
#[derive(Debug, Clone, PartialEq)]
pub struct Dissemination {
    pub record: SubscribeRecord,
    pub round: u32,
    remaining: Vec<GatewayId>,
    outstanding: usize,
    pub stored_answers: usize,
    pub seen_answers: usize,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DisseminationStep {
    Send(Vec<GatewayId>),
    Wait,
    Done,
}

impl Dissemination {
    /// `neighbours` is the kNN ∪ RPS union; the list is shuffled once so the
    /// per-round recipient subsets are a seeded random sample.
    pub fn new<R: Rng>(record: SubscribeRecord, self_id: GatewayId, neighbours: &[GatewayId], rng: &mut R) -> Self {
        let mut remaining: Vec<GatewayId> = neighbours
            .iter()
            .copied()
            .filter(|&g| g != self_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        remaining.shuffle(rng);
        Self {
            record,
            round: 0,
            remaining,
            outstanding: 0,
            stored_answers: 0,
            seen_answers: 0,
            finished: false,
        }
    }

    pub fn start(&mut self, params: &PubSubParams) -> DisseminationStep {
        self.next_round(params)
    }

    fn next_round(&mut self, params: &PubSubParams) -> DisseminationStep {
        if self.remaining.is_empty() || self.round >= params.hop_budget {
            self.finished = true;
            return DisseminationStep::Done;
        }
        let take = params.fanout.max(1).min(self.remaining.len());
        let recipients: Vec<GatewayId> = self.remaining.drain(..take).collect();
        self.round += 1;
        self.outstanding = recipients.len();
        DisseminationStep::Send(recipients)
    }

    pub fn on_ack(&mut self, ack: Ack, params: &PubSubParams) -> DisseminationStep {
        if self.finished {
            return DisseminationStep::Done;
        }
        match ack {
            Ack::Stored => self.stored_answers += 1,
            Ack::Seen | Ack::Expired => self.seen_answers += 1,
        }
        self.outstanding = self.outstanding.saturating_sub(1);
        if self.outstanding > 0 {
            DisseminationStep::Wait
        } else {
            self.next_round(params)
        }
    }
}

/// Synchronous replay of a dissemination over fixed views; returns the set
/// of gateways holding the record and the number of forwards per gateway.
pub fn disseminate_static<R: Rng>(
    views: &BTreeMap<GatewayId, Vec<GatewayId>>,
    source: GatewayId,
    params: &PubSubParams,
    rng: &mut R,
) -> (BTreeSet<GatewayId>, BTreeMap<GatewayId, usize>) {
    let mut stores: BTreeMap<GatewayId, PubSubStore> = views.keys().map(|&g| (g, PubSubStore::new(g))).collect();
    let (record, _) =
        stores
            .get_mut(&source)
            .expect("source in views")
            .subscribe(DevEui(0), params.subscribe_ttl, None, 0.0);
    let mut forwards: BTreeMap<GatewayId, usize> = BTreeMap::new();
    let mut queue = std::collections::VecDeque::from([source]);
    while let Some(g) = queue.pop_front() {
        let mut d = Dissemination::new(record, g, &views[&g], rng);
        let mut step = d.start(params);
        while let DisseminationStep::Send(to) = step {
            step = DisseminationStep::Wait;
            for r in to {
                *forwards.entry(g).or_default() += 1;
                let ack = match stores.get_mut(&r) {
                    Some(s) => s.receive(record, 0.0),
                    None => continue,
                };
                if ack == Ack::Stored {
                    queue.push_back(r);
                }
                step = d.on_ack(ack, params);
            }
        }
    }
    let holders = stores
        .iter()
        .filter(|(_, s)| s.has_seen(record.request_id))
        .map(|(&g, _)| g)
        .collect();
    (holders, forwards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gw(i: u32) -> GatewayId {
        GatewayId(i)
    }

    #[test]
    fn fresh_subscribe_disseminates() {
        let mut s = PubSubStore::new(gw(0));
        let (r, out) = s.subscribe(DevEui(7), 100.0, None, 0.0);
        assert_eq!(out, SubscribeOutcome::Disseminate);
        assert_eq!(r.expires_at, 100.0);
        assert_eq!(
            r.request_id,
            RequestId {
                issuer: gw(0),
                counter: 0
            }
        );
        let (r2, _) = s.subscribe(DevEui(8), 100.0, None, 0.0);
        assert_eq!(r2.request_id.counter, 1);
    }

    #[test]
    fn subscribe_after_publish_matches_immediately() {
        let mut s = PubSubStore::new(gw(0));
        assert!(s.on_join_request(DevEui(7), -90.0, 5.0).is_none());
        let (_, out) = s.subscribe(DevEui(7), 100.0, Some(gw(3)), 6.0);
        match out {
            SubscribeOutcome::Matched(p) => assert_eq!(p.hearing_gateway, gw(0)),
            o => panic!("{o:?}"),
        }
        assert_eq!(s.matching(DevEui(7), 6.0).unwrap().renter_gateway, Some(gw(3)));
    }

    #[test]
    fn receive_dedups_and_drops_expired() {
        let mut origin = PubSubStore::new(gw(0));
        let (r, _) = origin.subscribe(DevEui(1), 10.0, None, 0.0);
        let mut s = PubSubStore::new(gw(1));
        assert_eq!(s.receive(r, 1.0), Ack::Stored);
        assert_eq!(s.receive(r, 2.0), Ack::Seen);
        let mut late = PubSubStore::new(gw(2));
        assert_eq!(late.receive(r, 10.0), Ack::Expired);
        assert_eq!(late.subscribe_count(), 0);
    }

    #[test]
    fn join_request_matching() {
        let mut s = PubSubStore::new(gw(1));
        assert!(s.on_join_request(DevEui(3), -100.0, 0.0).is_none());
        assert_eq!(s.publish(DevEui(3)).unwrap().rssi, -100.0);
        let mut origin = PubSubStore::new(gw(0));
        let (r, _) = origin.subscribe(DevEui(3), 50.0, None, 0.0);
        s.receive(r, 0.0);
        assert_eq!(s.on_join_request(DevEui(3), -100.0, 1.0), Some(r));
    }

    #[test]
    fn expiry_boundary_is_exclusive() {
        let mut s = PubSubStore::new(gw(0));
        assert_eq!(s.expiry_sweep(0.0, 3600.0), 0);
        s.subscribe(DevEui(1), 10.0, None, 0.0);
        assert_eq!(s.expiry_sweep(9.0, 3600.0), 0);
        assert!(s.matching(DevEui(1), 10.0).is_none());
        assert_eq!(s.expiry_sweep(10.0, 3600.0), 1);
        assert!(s.records().all(|r| r.expires_at > 10.0));
    }

    #[test]
    fn subscribe_lapse_leaves_join_ignored() {
        let mut s = PubSubStore::new(gw(0));
        s.subscribe(DevEui(4), 60.0, None, 0.0);
        s.expiry_sweep(120.0, 3600.0);
        assert!(s.on_join_request(DevEui(4), -90.0, 130.0).is_none());
    }

    #[test]
    fn publish_horizon_purges() {
        let mut s = PubSubStore::new(gw(0));
        s.on_join_request(DevEui(2), -90.0, 0.0);
        assert_eq!(s.expiry_sweep(3599.0, 3600.0), 0);
        assert_eq!(s.expiry_sweep(3600.0, 3600.0), 1);
    }

    #[test]
    fn dissemination_rounds_cover_view_then_stop() {
        let params = PubSubParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut origin = PubSubStore::new(gw(0));
        let (r, _) = origin.subscribe(DevEui(1), 100.0, None, 0.0);
        let view: Vec<_> = (1..=6).map(gw).collect();
        let mut d = Dissemination::new(r, gw(0), &view, &mut rng);
        let DisseminationStep::Send(first) = d.start(&params) else {
            panic!()
        };
        assert_eq!(first.len(), 4);
        let mut step = DisseminationStep::Wait;
        for _ in &first {
            step = d.on_ack(Ack::Seen, &params);
        }
        let DisseminationStep::Send(second) = step else {
            panic!("{step:?}")
        };
        assert_eq!(second.len(), 2);
        assert!(first.iter().all(|g| !second.contains(g)));
        d.on_ack(Ack::Stored, &params);
        assert_eq!(d.on_ack(Ack::Stored, &params), DisseminationStep::Done);
        assert!(d.finished);
    }

    #[test]
    fn static_cluster_reaches_everyone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let views: BTreeMap<GatewayId, Vec<GatewayId>> = (0..10u32)
            .map(|i| (gw(i), vec![gw((i + 1) % 10), gw((i + 3) % 10)]))
            .collect();
        let (holders, forwards) = disseminate_static(&views, gw(0), &PubSubParams::default(), &mut rng);
        assert_eq!(holders.len(), 10);
        // every gateway forwards at most once per view member
        assert!(forwards.values().all(|&f| f <= 2));
    }
}
