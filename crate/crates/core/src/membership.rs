//! Local-cluster organisation: gateway radio profiles, kNN similarity views
//! and a random peer sampling service that keeps feeding new candidates to
//! the kNN classification.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{DevEui, GatewayId};
use crate::radio::Channel;

/// What a gateway hears: smoothed RSSI per end-device plus its per-channel
/// airtime occupation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GatewayProfile {
    pub gateway_id: GatewayId,
    pub heard: BTreeMap<DevEui, f64>,
    pub channel_occupation: [f64; Channel::COUNT],
    /// Sim time of the snapshot, used to keep the freshest copy.
    pub stamp: f64,
}

impl GatewayProfile {
    pub fn new(gateway_id: GatewayId) -> Self {
        Self {
            gateway_id,
            ..Self::default()
        }
    }

    pub fn with_devices(gateway_id: GatewayId, heard: impl IntoIterator<Item = (DevEui, f64)>) -> Self {
        Self {
            gateway_id,
            heard: heard.into_iter().collect(),
            ..Self::default()
        }
    }

    /// Mean occupation across channels.
    pub fn occupation(&self) -> f64 {
        self.channel_occupation.iter().sum::<f64>() / Channel::COUNT as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MembershipParams {
    pub k: usize,
    pub r: usize,
    pub gossip_period: f64,
    pub rssi_dynamic_range: f64,
    pub ema_alpha: f64,
    /// A device silent for this long leaves the profile.
    pub staleness_horizon: f64,
}

impl Default for MembershipParams {
    fn default() -> Self {
        Self {
            k: 5,
            r: 5,
            gossip_period: 60.0,
            rssi_dynamic_range: 60.0,
            ema_alpha: 0.3,
            staleness_horizon: 3.0 * 3600.0,
        }
    }
}

/// Weighted Jaccard similarity: each shared device contributes
/// `1 - |Δrssi| / range` (clamped to [0, 1]) and the sum is divided by the
/// size of the device union. Two empty profiles score 0.
pub fn similarity(a: &GatewayProfile, b: &GatewayProfile, rssi_dynamic_range: f64) -> f64 {
    let mut ia = a.heard.iter().peekable();
    let mut ib = b.heard.iter().peekable();
    let mut shared = 0.0;
    let mut union = 0usize;
    loop {
        match (ia.peek(), ib.peek()) {
            (None, None) => break,
            (Some(_), None) => {
                union += ia.len();
                break;
            }
            (None, Some(_)) => {
                union += ib.len();
                break;
            }
            (Some((da, ra)), Some((db, rb))) => {
                union += 1;
                match da.cmp(db) {
                    std::cmp::Ordering::Less => {
                        ia.next();
                    }
                    std::cmp::Ordering::Greater => {
                        ib.next();
                    }
                    std::cmp::Ordering::Equal => {
                        let w = 1.0 - (*ra - *rb).abs() / rssi_dynamic_range;
                        shared += w.clamp(0.0, 1.0);
                        ia.next();
                        ib.next();
                    }
                }
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        (shared / union as f64).clamp(0.0, 1.0)
    }
}

/// The k most similar gateways, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnnView {
    entries: Vec<(GatewayId, f64)>,
}

impl KnnView {
    /// Keeps the `k` best candidates; equal scores go to the lowest id.
    pub fn from_candidates(
        self_id: GatewayId,
        candidates: impl IntoIterator<Item = (GatewayId, f64)>,
        k: usize,
    ) -> Self {
        let mut best: BTreeMap<GatewayId, f64> = BTreeMap::new();
        for (id, score) in candidates {
            if id == self_id {
                continue;
            }
            best.entry(id).and_modify(|s| *s = s.max(score)).or_insert(score);
        }
        let mut entries: Vec<_> = best.into_iter().collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        entries.truncate(k);
        Self { entries }
    }

    pub fn entries(&self) -> &[(GatewayId, f64)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = GatewayId> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RpsView {
    entries: Vec<GatewayId>,
}

impl RpsView {
    pub fn new(entries: Vec<GatewayId>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[GatewayId] {
        &self.entries
    }
}

/// What a gateway sends to a gossip partner: its own profile, the profiles
/// of its kNN entries and its random sample.
#[derive(Debug, Clone)]
pub struct PeerExchange {
    pub from: GatewayId,
    pub profile: Arc<GatewayProfile>,
    pub neighbors: Vec<Arc<GatewayProfile>>,
    pub rps: Vec<GatewayId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileChange {
    Appeared,
    Updated,
}

/// One gateway's membership state.
#[derive(Debug, Clone)]
pub struct GatewayMembership {
    pub params: MembershipParams,
    profile: GatewayProfile,
    last_heard: BTreeMap<DevEui, f64>,
    known_profiles: BTreeMap<GatewayId, Arc<GatewayProfile>>,
    known_members: BTreeSet<GatewayId>,
    knn: KnnView,
    rps: RpsView,
}

impl GatewayMembership {
    pub fn new(id: GatewayId, params: MembershipParams) -> Self {
        Self {
            params,
            profile: GatewayProfile::new(id),
            last_heard: BTreeMap::new(),
            known_profiles: BTreeMap::new(),
            known_members: BTreeSet::new(),
            knn: KnnView::default(),
            rps: RpsView::default(),
        }
    }

    pub fn id(&self) -> GatewayId {
        self.profile.gateway_id
    }

    pub fn profile(&self) -> &GatewayProfile {
        &self.profile
    }

    pub fn set_profile_devices(&mut self, heard: BTreeMap<DevEui, f64>) {
        self.profile.heard = heard;
    }

    pub fn knn(&self) -> &KnnView {
        &self.knn
    }

    pub fn rps(&self) -> &RpsView {
        &self.rps
    }

    pub fn known_members(&self) -> &BTreeSet<GatewayId> {
        &self.known_members
    }

    /// Bootstraps the sample with a random subset of `members`.
    pub fn seed<R: Rng>(&mut self, members: &[GatewayId], rng: &mut R) {
        let me = self.id();
        self.known_members.extend(members.iter().copied().filter(|&m| m != me));
        self.refresh_rps(rng);
    }

    /// Union of the kNN and random views, ascending, without duplicates.
    pub fn peers(&self) -> Vec<GatewayId> {
        let set: BTreeSet<GatewayId> = self.knn.ids().chain(self.rps.entries.iter().copied()).collect();
        set.into_iter().collect()
    }

    pub fn neighbor_profiles(&self) -> Vec<Arc<GatewayProfile>> {
        self.knn
            .ids()
            .filter_map(|id| self.known_profiles.get(&id).cloned())
            .collect()
    }

    /// Snapshot for a gossip partner; `occupation` is this gateway's current
    /// channel occupation.
    pub fn exchange(&mut self, occupation: [f64; Channel::COUNT], now: f64) -> PeerExchange {
        self.profile.channel_occupation = occupation;
        self.profile.stamp = now;
        PeerExchange {
            from: self.id(),
            profile: Arc::new(self.profile.clone()),
            neighbors: self.neighbor_profiles(),
            rps: self.rps.entries.clone(),
        }
    }

    /// Records a clean reception from `dev`.
    pub fn observe(&mut self, dev: DevEui, rssi: f64, now: f64) -> ProfileChange {
        self.last_heard.insert(dev, now);
        let alpha = self.params.ema_alpha;
        match self.profile.heard.get_mut(&dev) {
            Some(smoothed) => {
                *smoothed = alpha * rssi + (1.0 - alpha) * *smoothed;
                ProfileChange::Updated
            }
            None => {
                self.profile.heard.insert(dev, rssi);
                ProfileChange::Appeared
            }
        }
    }

    /// Drops devices not heard within the staleness horizon.
    pub fn evict_stale(&mut self, now: f64) -> Vec<DevEui> {
        let horizon = self.params.staleness_horizon;
        let stale: Vec<DevEui> = self
            .last_heard
            .iter()
            .filter(|&(_, &t)| now - t > horizon)
            .map(|(&d, _)| d)
            .collect();
        for d in &stale {
            self.last_heard.remove(d);
            self.profile.heard.remove(d);
        }
        stale
    }

    fn learn(&mut self, p: &Arc<GatewayProfile>) {
        if p.gateway_id == self.id() {
            return;
        }
        self.known_members.insert(p.gateway_id);
        let fresher = self
            .known_profiles
            .get(&p.gateway_id)
            .is_none_or(|old| old.stamp <= p.stamp);
        if fresher {
            self.known_profiles.insert(p.gateway_id, Arc::clone(p));
        }
    }

    /// Merges a partner's exchange and reclassifies.
    pub fn absorb(&mut self, ex: &PeerExchange) {
        self.learn(&ex.profile);
        for p in &ex.neighbors {
            self.learn(p);
        }
        let me = self.id();
        self.known_members.extend(ex.rps.iter().copied().filter(|&m| m != me));
        self.reclassify();
    }

    pub fn reclassify(&mut self) {
        let range = self.params.rssi_dynamic_range;
        let me = &self.profile;
        let scored = self
            .known_profiles
            .values()
            .map(|p| (p.gateway_id, similarity(me, p, range)));
        self.knn = KnnView::from_candidates(me.gateway_id, scored, self.params.k);
    }

    pub fn refresh_rps<R: Rng>(&mut self, rng: &mut R) {
        let pool: Vec<GatewayId> = self.known_members.iter().copied().collect();
        let mut picked: Vec<GatewayId> = pool
            .choose_multiple(rng, self.params.r.min(pool.len()))
            .copied()
            .collect();
        picked.sort();
        self.rps = RpsView::new(picked);
    }

    /// One periodic round: merge the partners' answers, then resample the
    /// random view.
    pub fn gossip_round<R: Rng>(&mut self, exchanges: &[PeerExchange], rng: &mut R) -> &KnnView {
        for ex in exchanges {
            self.absorb(ex);
        }
        self.refresh_rps(rng);
        &self.knn
    }
}

/// Sliding-window airtime tracker behind `channel_occupation`. A device
/// newly placed on a channel holds a reservation of its projected load that
/// fades linearly over one window, while its measured airtime builds up.
#[derive(Debug, Clone)]
pub struct OccupancyTracker {
    window: f64,
    heard: [VecDeque<(f64, f64)>; Channel::COUNT],
    /// Channel, projected fraction, start.
    reservations: BTreeMap<DevEui, (Channel, f64, f64)>,
}

impl OccupancyTracker {
    pub fn new(window: f64) -> Self {
        Self {
            window,
            heard: Default::default(),
            reservations: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, channel: Channel, start: f64, airtime: f64) {
        self.heard[channel.index()].push_back((start, airtime));
    }

    pub fn reserve(&mut self, dev: DevEui, channel: Channel, fraction: f64, now: f64) {
        self.reservations.insert(dev, (channel, fraction, now));
    }

    pub fn release(&mut self, dev: DevEui) {
        self.reservations.remove(&dev);
    }

    pub fn occupation(&mut self, now: f64) -> [f64; Channel::COUNT] {
        let horizon = now - self.window;
        let mut out = [0.0; Channel::COUNT];
        for (c, q) in self.heard.iter_mut().enumerate() {
            while q.front().is_some_and(|&(s, _)| s <= horizon) {
                q.pop_front();
            }
            out[c] = q.iter().map(|&(_, a)| a).sum::<f64>() / self.window;
        }
        self.reservations.retain(|_, r| r.2 > horizon);
        for &(ch, frac, start) in self.reservations.values() {
            let left = 1.0 - ((now - start) / self.window).clamp(0.0, 1.0);
            out[ch.index()] += frac * left;
        }
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gw(i: u32) -> GatewayId {
        GatewayId(i)
    }

    #[test]
    fn similarity_fixed_points() {
        let a = GatewayProfile::with_devices(gw(0), [(DevEui(1), -80.0)]);
        let b = GatewayProfile::with_devices(gw(1), [(DevEui(1), -80.0), (DevEui(2), -90.0)]);
        assert_eq!(similarity(&a, &b, 60.0), 0.5);
        assert_eq!(similarity(&b, &b, 60.0), 1.0);
        let c = GatewayProfile::with_devices(gw(2), [(DevEui(9), -70.0)]);
        assert_eq!(similarity(&a, &c, 60.0), 0.0);
        // shared device with 30 dB spread on a 60 dB range weighs 0.5
        let d = GatewayProfile::with_devices(gw(3), [(DevEui(1), -110.0)]);
        assert_eq!(similarity(&a, &d, 60.0), 0.5);
    }

    #[test]
    fn knn_view_invariants() {
        let v = KnnView::from_candidates(
            gw(0),
            [(gw(0), 1.0), (gw(3), 0.2), (gw(2), 0.9), (gw(1), 0.2), (gw(2), 0.1)],
            2,
        );
        assert_eq!(v.entries(), &[(gw(2), 0.9), (gw(1), 0.2)]);
    }

    fn random_profile(id: u32, rng: &mut ChaCha8Rng, devices: u32) -> GatewayProfile {
        let mut heard = Vec::new();
        for d in 0..devices {
            if rng.gen_bool(0.5) {
                heard.push((DevEui(d), rng.gen_range(-130.0..-60.0)));
            }
        }
        GatewayProfile::with_devices(gw(id), heard)
    }

    fn exhaustive_knn(profiles: &[GatewayProfile], i: usize, k: usize) -> Vec<GatewayId> {
        let mut scored: Vec<(GatewayId, f64)> = profiles
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, p)| (p.gateway_id, similarity(&profiles[i], p, 60.0)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|e| e.0).collect()
    }

    /// Synchronous rounds: every node exchanges with each of its peers.
    fn run_rounds(nodes: &mut [GatewayMembership], rounds: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<GatewayId>>> {
        let mut history = Vec::new();
        for _ in 0..rounds {
            for i in 0..nodes.len() {
                let peers = nodes[i].peers();
                let mut answers = Vec::new();
                let mine = nodes[i].exchange([0.0; 8], 0.0);
                for p in peers {
                    let j = p.index();
                    nodes[j].absorb(&mine);
                    answers.push(nodes[j].exchange([0.0; 8], 0.0));
                }
                nodes[i].gossip_round(&answers, rng);
            }
            history.push(nodes.iter().map(|n| n.knn().ids().collect()).collect());
        }
        history
    }

    fn cluster(
        n: u32,
        params: MembershipParams,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<GatewayProfile>, Vec<GatewayMembership>) {
        let profiles: Vec<_> = (0..n).map(|i| random_profile(i, rng, 40)).collect();
        let ids: Vec<_> = (0..n).map(gw).collect();
        let nodes = profiles
            .iter()
            .map(|p| {
                let mut m = GatewayMembership::new(p.gateway_id, params);
                m.set_profile_devices(p.heard.clone());
                // seeded with a random subset of the others
                let subset: Vec<_> = ids.choose_multiple(rng, 2).copied().collect();
                m.seed(&subset, rng);
                m
            })
            .collect();
        (profiles, nodes)
    }

    #[test]
    fn gossip_converges_to_exhaustive_knn() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let params = MembershipParams {
                k: 3,
                r: 3,
                ..Default::default()
            };
            let (profiles, mut nodes) = cluster(12, params, &mut rng);
            let history = run_rounds(&mut nodes, 25, &mut rng);
            for (i, node) in nodes.iter().enumerate() {
                let got: Vec<_> = node.knn().ids().collect();
                assert_eq!(got, exhaustive_knn(&profiles, i, 3), "node {i}");
            }
            // fixed point: the last rounds did not change any view
            let n = history.len();
            assert_eq!(history[n - 1], history[n - 2]);
        }
    }

    #[test]
    fn large_k_keeps_everyone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = MembershipParams {
            k: 10,
            r: 2,
            ..Default::default()
        };
        let (_, mut nodes) = cluster(6, params, &mut rng);
        run_rounds(&mut nodes, 15, &mut rng);
        for node in &nodes {
            let mut ids: Vec<_> = node.knn().ids().collect();
            ids.sort();
            let expected: Vec<_> = (0..6).map(gw).filter(|&g| g != node.id()).collect();
            assert_eq!(ids, expected);
        }
    }

    #[test]
    fn newcomer_enters_random_views_with_zero_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = MembershipParams {
            k: 2,
            r: 2,
            ..Default::default()
        };
        let (_, mut nodes) = cluster(5, params, &mut rng);
        run_rounds(&mut nodes, 5, &mut rng);
        let mut newcomer = GatewayMembership::new(gw(5), params);
        newcomer.seed(&[gw(0)], &mut rng);
        nodes.push(newcomer);
        let mut seen_in_rps = false;
        for _ in 0..params.r * 4 {
            run_rounds(&mut nodes, 1, &mut rng);
            seen_in_rps |= nodes[..5].iter().any(|n| n.rps().entries().contains(&gw(5)));
        }
        assert!(seen_in_rps);
        let empty = GatewayProfile::new(gw(5));
        assert_eq!(similarity(nodes[0].profile(), &empty, 60.0), 0.0);
    }

    #[test]
    fn observe_reports_appearance_and_eviction() {
        let mut m = GatewayMembership::new(gw(0), MembershipParams::default());
        assert_eq!(m.observe(DevEui(1), -100.0, 0.0), ProfileChange::Appeared);
        assert_eq!(m.observe(DevEui(1), -90.0, 10.0), ProfileChange::Updated);
        let smoothed = m.profile().heard[&DevEui(1)];
        assert!((smoothed - (-97.0)).abs() < 1e-9);
        assert!(m.evict_stale(100.0).is_empty());
        let horizon = m.params.staleness_horizon;
        assert_eq!(m.evict_stale(10.0 + horizon + 1.0), vec![DevEui(1)]);
        assert!(m.profile().heard.is_empty());
    }

    #[test]
    fn occupancy_window_and_reservations() {
        let mut t = OccupancyTracker::new(100.0);
        t.record(Channel::new(2).unwrap(), 0.0, 10.0);
        t.reserve(DevEui(4), Channel::new(5).unwrap(), 0.01, 0.0);
        let o = t.occupation(0.0);
        assert!((o[5] - 0.01).abs() < 1e-12);
        let o = t.occupation(50.0);
        assert!((o[2] - 0.1).abs() < 1e-12);
        assert!((o[5] - 0.005).abs() < 1e-12);
        t.reserve(DevEui(6), Channel::new(1).unwrap(), 0.02, 50.0);
        t.release(DevEui(6));
        let o = t.occupation(150.0);
        assert_eq!(o, [0.0; 8]);
    }

    fn arb_profile(id: u32) -> impl Strategy<Value = GatewayProfile> {
        proptest::collection::btree_map(0u32..30, -140.0f64..-40.0, 0..20)
            .prop_map(move |m| GatewayProfile::with_devices(GatewayId(id), m.into_iter().map(|(d, r)| (DevEui(d), r))))
    }

    proptest! {
        #[test]
        fn similarity_symmetric_and_bounded(a in arb_profile(0), b in arb_profile(1)) {
            let ab = similarity(&a, &b, 60.0);
            let ba = similarity(&b, &a, 60.0);
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
