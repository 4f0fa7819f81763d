use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lorafed::consensus::{elect, handling_consensus, HandlerProposal, Participant, ScoreWeights};
use lorafed::experiments::mean_std;
use lorafed::ids::{ClusterId, DevEui, GatewayId, Position};
use lorafed::intercluster::{build_route, flood, ClusterGraph};
use lorafed::membership::{similarity, GatewayProfile};
use lorafed::radio::{
    deliver_schedule, time_on_air, Channel, DutyCycleBudget, DutyDecision, Frame, FrameId, FrameKind, PhyParams,
    SpreadingFactor,
};

fn sf(v: u8) -> SpreadingFactor {
    SpreadingFactor::new(v).unwrap()
}

fn arb_graph() -> impl Strategy<Value = ClusterGraph> {
    (2usize..=15)
        .prop_flat_map(|n| (Just(n), proptest::collection::vec((0..n as u32, 0..n as u32), 0..40)))
        .prop_map(|(n, extra)| {
            // a random spanning path keeps it connected
            let mut edges: Vec<(u32, u32)> = (1..n as u32).map(|i| (i - 1, i)).collect();
            edges.extend(extra.into_iter().filter(|(a, b)| a != b));
            ClusterGraph::from_edges(n, &edges).unwrap()
        })
}

fn bfs(graph: &ClusterGraph, from: ClusterId) -> BTreeMap<ClusterId, usize> {
    let mut dist = BTreeMap::from([(from, 0)]);
    let mut queue = VecDeque::from([from]);
    while let Some(c) = queue.pop_front() {
        for &n in graph.neighbors(c) {
            if !dist.contains_key(&n) {
                dist.insert(n, dist[&c] + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

proptest! {
    #[test]
    fn airtime_grows_with_payload_and_sf(payload in 1usize..=50, s in 7u8..=11) {
        let phy = PhyParams::calibrated();
        let base = time_on_air(payload, sf(s), &phy).unwrap();
        prop_assert!(time_on_air(payload + 1, sf(s), &phy).unwrap() >= base);
        prop_assert!(time_on_air(payload, sf(s + 1), &phy).unwrap() > base);
    }

    #[test]
    fn duty_budget_never_overspends(
        limit in 0.001f64..0.2,
        steps in proptest::collection::vec((0.0f64..120.0, 0.05f64..3.0), 1..200),
    ) {
        let window = 600.0;
        let mut budget = DutyCycleBudget::with_window(limit, window);
        let mut now = 0.0;
        let mut sent: Vec<(f64, f64)> = Vec::new();
        for (gap, airtime) in steps {
            now += gap;
            match budget.consume(airtime, now) {
                DutyDecision::Allowed => sent.push((now, airtime)),
                DutyDecision::Deferred(t) if t.is_finite() => {
                    prop_assert!(t >= now);
                    prop_assert_eq!(budget.consume(airtime, t), DutyDecision::Allowed);
                    sent.push((t, airtime));
                    now = t;
                }
                DutyDecision::Deferred(_) => prop_assert!(airtime > limit * window),
            }
        }
        for (i, &(start, _)) in sent.iter().enumerate() {
            let used: f64 = sent[i..].iter().take_while(|(t, _)| *t < start + window).map(|(_, a)| a).sum();
            prop_assert!(used <= limit * window + 1e-6, "window at {start} used {used}");
        }
    }

    #[test]
    fn receiver_matches_overlap_oracle(
        frames in proptest::collection::vec((0u8..3, 0.0f64..20.0, 0.05f64..2.0), 0..40),
    ) {
        let list: Vec<Frame> = frames
            .iter()
            .enumerate()
            .map(|(i, &(ch, start, airtime))| Frame {
                id: FrameId(i as u64),
                kind: FrameKind::DataUplink,
                dev_eui: DevEui(i as u32),
                channel: Channel::new(ch).unwrap(),
                sf: sf(7),
                payload_size: 1,
                tx_start: start,
                airtime,
                origin: Position::default(),
                tx_power_dbm: 14.0,
            })
            .collect();
        let oracle: BTreeSet<FrameId> = list
            .iter()
            .filter(|f| {
                !list.iter().any(|g| {
                    g.id != f.id && g.channel == f.channel && g.tx_start < f.end() && f.tx_start < g.end()
                })
            })
            .map(|f| f.id)
            .collect();
        prop_assert_eq!(deliver_schedule(&list), oracle);
    }

    #[test]
    fn full_exchange_consensus_agrees(
        props in proptest::collection::vec((0.0f64..1.0, -137.0f64..-40.0, 0u32..600), 1..12),
        rounds in 1u32..4,
    ) {
        let w = ScoreWeights::default();
        let proposals: Vec<HandlerProposal> = props
            .iter()
            .enumerate()
            .map(|(i, &(occupation, rssi, pending_load))| HandlerProposal {
                gateway_id: GatewayId(i as u32),
                occupation,
                rssi,
                pending_load,
            })
            .collect();
        let ids: Vec<GatewayId> = proposals.iter().map(|p| p.gateway_id).collect();
        let participants: Vec<Participant> = proposals
            .iter()
            .map(|&proposal| Participant { proposal, recipients: ids.clone() })
            .collect();
        let decisions = handling_consensus(DevEui(1), &participants, rounds, &w);
        let expected = elect(&proposals, &w).unwrap();
        prop_assert!(decisions.values().all(|&d| d == expected));
        let mut reversed = proposals.clone();
        reversed.reverse();
        prop_assert_eq!(elect(&reversed, &w), Some(expected));
    }

    #[test]
    fn similarity_is_bounded_and_symmetric(
        a in proptest::collection::btree_map(0u32..30, -137.0f64..-40.0, 0..20),
        b in proptest::collection::btree_map(0u32..30, -137.0f64..-40.0, 0..20),
    ) {
        let pa = GatewayProfile::with_devices(GatewayId(0), a.iter().map(|(&d, &r)| (DevEui(d), r)));
        let pb = GatewayProfile::with_devices(GatewayId(1), b.iter().map(|(&d, &r)| (DevEui(d), r)));
        let s = similarity(&pa, &pb, 97.0);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, similarity(&pb, &pa, 97.0));
        if !a.is_empty() {
            prop_assert!((similarity(&pa, &pa, 97.0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn routes_are_shortest_and_floods_reach_everyone_once(graph in arb_graph(), o in 0u32..15, d in 0u32..15) {
        let n = graph.len() as u32;
        let (o, d) = (ClusterId(o % n), ClusterId(d % n));
        let dist = bfs(&graph, o);
        let route = build_route(o, d, &graph).unwrap();
        prop_assert_eq!(route.first(), Some(&o));
        prop_assert_eq!(route.last(), Some(&d));
        prop_assert_eq!(route.len() - 1, dist[&d]);
        for hop in route.windows(2) {
            prop_assert!(graph.neighbors(hop[0]).contains(&hop[1]));
        }
        let f = flood(&graph, o);
        let reached: Vec<ClusterId> = f.deliveries.iter().map(|(c, _)| *c).collect();
        let unique: BTreeSet<ClusterId> = reached.iter().copied().collect();
        prop_assert_eq!(reached.len(), unique.len());
        prop_assert_eq!(unique.len(), graph.len());
        for (c, depth) in &f.deliveries {
            prop_assert_eq!(*depth, dist[c]);
        }
    }

    #[test]
    fn mean_std_is_sane(values in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
        let (mean, std) = mean_std(&values);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= lo - 1e-6 && mean <= hi + 1e-6);
        prop_assert!(std >= 0.0);
        let (_, flat) = mean_std(&vec![values[0]; values.len()]);
        prop_assert!(flat.abs() < 1e-9);
    }
}

#[test]
fn seeded_streams_are_reproducible() {
    use rand::Rng;
    let a: Vec<u64> = ChaCha8Rng::seed_from_u64(9)
        .sample_iter(rand::distributions::Standard)
        .take(8)
        .collect();
    let b: Vec<u64> = ChaCha8Rng::seed_from_u64(9)
        .sample_iter(rand::distributions::Standard)
        .take(8)
        .collect();
    assert_eq!(a, b);
}
