//! Global overlay between local clusters: nested random cluster graphs,
//! per-cluster leaders, breadth-first Subscribe flooding and source-routed
//! unicast over minimal-hop paths.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ClusterId, DevEui, GatewayId, RequestId};

const MAX_GRAPH_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    pub n1: usize,
    pub p1: f64,
    pub n2: usize,
    pub p2: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            n1: 1,
            p1: 1.0,
            n2: 1,
            p2: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterGraph {
    adjacency: Vec<BTreeSet<ClusterId>>,
    pub params: Option<GraphParams>,
}

impl ClusterGraph {
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Result<Self> {
        let mut adjacency = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a as usize >= n || b as usize >= n || a == b {
                return Err(Error::Config(format!("bad cluster edge ({a}, {b})")));
            }
            adjacency[a as usize].insert(ClusterId(b));
            adjacency[b as usize].insert(ClusterId(a));
        }
        Ok(Self {
            adjacency,
            params: None,
        })
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn clusters(&self) -> impl Iterator<Item = ClusterId> {
        (0..self.adjacency.len() as u32).map(ClusterId)
    }

    pub fn neighbors(&self, c: ClusterId) -> &BTreeSet<ClusterId> {
        &self.adjacency[c.index()]
    }

    pub fn contains(&self, c: ClusterId) -> bool {
        c.index() < self.adjacency.len()
    }

    pub fn edges(&self) -> Vec<(ClusterId, ClusterId)> {
        let mut out = Vec::new();
        for (a, ns) in self.adjacency.iter().enumerate() {
            for &b in ns {
                if (a as u32) < b.0 {
                    out.push((ClusterId(a as u32), b));
                }
            }
        }
        out
    }

    /// Hop distances from `from`; unreachable clusters are absent.
    pub fn hop_distances(&self, from: ClusterId) -> BTreeMap<ClusterId, usize> {
        let mut dist = BTreeMap::from([(from, 0)]);
        let mut queue = VecDeque::from([from]);
        while let Some(c) = queue.pop_front() {
            let d = dist[&c];
            for &n in self.neighbors(c) {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(n) {
                    e.insert(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.is_empty() || self.hop_distances(ClusterId(0)).len() == self.len()
    }
}

fn gnp<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if rng.gen_bool(p) {
                edges.push((a, b));
            }
        }
    }
    edges
}

/// Two-level nested random graph: a G(n1, p1) top graph whose nodes each
/// expand into a G(n2, p2) sub-graph. A top-level edge joins one random
/// cluster of each side. Resampled until connected.
pub fn generate_cluster_graph<R: Rng>(params: GraphParams, rng: &mut R) -> Result<ClusterGraph> {
    if params.n1 == 0 || params.n2 == 0 {
        return Err(Error::Config("cluster graph needs n1, n2 >= 1".into()));
    }
    for p in [params.p1, params.p2] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("edge probability {p} outside (0, 1]")));
        }
    }
    let n = params.n1 * params.n2;
    for _ in 0..MAX_GRAPH_ATTEMPTS {
        let mut edges = Vec::new();
        for block in 0..params.n1 {
            let base = block * params.n2;
            for (a, b) in gnp(params.n2, params.p2, rng) {
                edges.push(((base + a) as u32, (base + b) as u32));
            }
        }
        for (a, b) in gnp(params.n1, params.p1, rng) {
            let ca = a * params.n2 + rng.gen_range(0..params.n2);
            let cb = b * params.n2 + rng.gen_range(0..params.n2);
            edges.push((ca as u32, cb as u32));
        }
        let mut graph = ClusterGraph::from_edges(n, &edges)?;
        if graph.is_connected() {
            graph.params = Some(params);
            return Ok(graph);
        }
    }
    Err(Error::Disconnected(MAX_GRAPH_ATTEMPTS))
}

/// Lowest occupation wins, ties to the lowest id.
pub fn elect_leader(members: &[(GatewayId, f64)]) -> Option<GatewayId> {
    members
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|m| m.0)
}

/// Minimal-hop path from `origin` to `destination`, both included. Among
/// equal-length paths the lexicographically smallest is returned.
pub fn build_route(origin: ClusterId, destination: ClusterId, graph: &ClusterGraph) -> Result<Vec<ClusterId>> {
    if !graph.contains(origin) || !graph.contains(destination) {
        return Err(Error::NoRoute {
            from: origin,
            to: destination,
        });
    }
    let to_dest = graph.hop_distances(destination);
    let Some(&hops) = to_dest.get(&origin) else {
        return Err(Error::NoRoute {
            from: origin,
            to: destination,
        });
    };
    let mut path = Vec::with_capacity(hops + 1);
    path.push(origin);
    let mut at = origin;
    while at != destination {
        let d = to_dest[&at];
        at = *graph
            .neighbors(at)
            .iter()
            .find(|n| to_dest.get(n) == Some(&(d - 1)))
            .expect("bfs layer has a predecessor");
        path.push(at);
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterKind {
    SubscribeFlood,
    PublishMatch,
    DeviceData,
    KeyMaterial,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    /// Tree flood; `parent` is the cluster that relayed this copy.
    Flood {
        request: RequestId,
        parent: Option<ClusterId>,
    },
    /// Source route with the index of the cluster currently holding it.
    Path { path: Vec<ClusterId>, hop: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterClusterMessage<P> {
    pub kind: InterKind,
    pub origin: ClusterId,
    pub routing: Routing,
    pub payload: P,
}

impl<P> InterClusterMessage<P> {
    pub fn destination(&self) -> Option<ClusterId> {
        match &self.routing {
            Routing::Path { path, .. } => path.last().copied(),
            Routing::Flood { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForwardAction<P> {
    /// Destined here: hand over to local dissemination or the local sender.
    Deliver(InterClusterMessage<P>),
    /// Relay copies to neighbouring leaders.
    Relay(Vec<(ClusterId, InterClusterMessage<P>)>),
    /// Flood copy of a request already seen.
    Duplicate,
}

/// State owned by whichever gateway currently leads a cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderState {
    pub cluster_id: ClusterId,
    pub leader_gateway: GatewayId,
    pub term: u32,
    pub neighbor_leaders: BTreeSet<ClusterId>,
    pub route_cache: BTreeMap<ClusterId, Vec<ClusterId>>,
    pub pending_sender_map: BTreeMap<DevEui, GatewayId>,
    seen_floods: BTreeMap<RequestId, Option<ClusterId>>,
}

impl LeaderState {
    pub fn new(cluster_id: ClusterId, leader_gateway: GatewayId, graph: &ClusterGraph) -> Self {
        Self {
            cluster_id,
            leader_gateway,
            term: 0,
            neighbor_leaders: graph.neighbors(cluster_id).clone(),
            route_cache: BTreeMap::new(),
            pending_sender_map: BTreeMap::new(),
            seen_floods: BTreeMap::new(),
        }
    }

    /// Installs a new leader. Route cache and sender map carry over.
    pub fn handoff(&mut self, new_leader: GatewayId) -> bool {
        if new_leader == self.leader_gateway {
            return false;
        }
        self.leader_gateway = new_leader;
        self.term += 1;
        true
    }

    pub fn flood_parent(&self, request: RequestId) -> Option<Option<ClusterId>> {
        self.seen_floods.get(&request).copied()
    }

    /// Cached minimal-hop route towards `destination`.
    pub fn route_to(&mut self, destination: ClusterId, graph: &ClusterGraph) -> Result<Vec<ClusterId>> {
        if let Some(p) = self.route_cache.get(&destination) {
            return Ok(p.clone());
        }
        let path = build_route(self.cluster_id, destination, graph)?;
        self.route_cache.insert(destination, path.clone());
        Ok(path)
    }

    /// Starts a source-routed message from this cluster, remembering the
    /// local sender for replies.
    pub fn originate<P: Clone>(
        &mut self,
        kind: InterKind,
        destination: ClusterId,
        sender: Option<(DevEui, GatewayId)>,
        payload: P,
        graph: &ClusterGraph,
    ) -> Result<ForwardAction<P>> {
        if let Some((dev, gw)) = sender {
            self.pending_sender_map.insert(dev, gw);
        }
        let path = self.route_to(destination, graph)?;
        let msg = InterClusterMessage {
            kind,
            origin: self.cluster_id,
            routing: Routing::Path { path, hop: 0 },
            payload,
        };
        self.forward(msg)
    }

    /// Starts a Subscribe flood rooted at this cluster.
    pub fn propagate_subscribe<P: Clone>(
        &mut self,
        request: RequestId,
        payload: P,
    ) -> Vec<(ClusterId, InterClusterMessage<P>)> {
        if self.seen_floods.contains_key(&request) {
            return Vec::new();
        }
        self.seen_floods.insert(request, None);
        self.neighbor_leaders
            .iter()
            .map(|&n| {
                (
                    n,
                    InterClusterMessage {
                        kind: InterKind::SubscribeFlood,
                        origin: self.cluster_id,
                        routing: Routing::Flood {
                            request,
                            parent: Some(self.cluster_id),
                        },
                        payload: payload.clone(),
                    },
                )
            })
            .collect()
    }

    /// Handles a message arriving at this cluster's leader.
    pub fn forward<P: Clone>(&mut self, msg: InterClusterMessage<P>) -> Result<ForwardAction<P>> {
        match &msg.routing {
            Routing::Path { path, hop } => {
                let (path, hop) = (path.clone(), *hop);
                if path.get(hop) != Some(&self.cluster_id) {
                    return Err(Error::NotAdjacent {
                        at: self.cluster_id,
                        next: path.get(hop).copied().unwrap_or(self.cluster_id),
                    });
                }
                if hop + 1 == path.len() {
                    return Ok(ForwardAction::Deliver(msg));
                }
                let next = path[hop + 1];
                if !self.neighbor_leaders.contains(&next) {
                    return Err(Error::NotAdjacent {
                        at: self.cluster_id,
                        next,
                    });
                }
                let relayed = InterClusterMessage {
                    routing: Routing::Path { path, hop: hop + 1 },
                    ..msg
                };
                Ok(ForwardAction::Relay(vec![(next, relayed)]))
            }
            Routing::Flood { request, parent } => {
                let (request, parent) = (*request, *parent);
                if self.seen_floods.contains_key(&request) {
                    return Ok(ForwardAction::Duplicate);
                }
                self.seen_floods.insert(request, parent);
                Ok(ForwardAction::Deliver(msg))
            }
        }
    }

    /// Copies of a freshly delivered flood message for every neighbour but
    /// its parent.
    pub fn flood_onward<P: Clone>(&self, msg: &InterClusterMessage<P>) -> Vec<(ClusterId, InterClusterMessage<P>)> {
        let Routing::Flood { request, parent } = msg.routing else {
            return Vec::new();
        };
        self.neighbor_leaders
            .iter()
            .filter(|&&n| Some(n) != parent)
            .map(|&n| {
                (
                    n,
                    InterClusterMessage {
                        routing: Routing::Flood {
                            request,
                            parent: Some(self.cluster_id),
                        },
                        ..msg.clone()
                    },
                )
            })
            .collect()
    }
}

/// Result of replaying a flood over a graph with unit link latency.
#[derive(Debug, Clone, PartialEq)]
pub struct FloodOutcome {
    /// Accepted copies, in delivery order, with their depth.
    pub deliveries: Vec<(ClusterId, usize)>,
    pub parents: BTreeMap<ClusterId, Option<ClusterId>>,
    pub messages: usize,
    pub duplicates: usize,
}

/// Synchronous FIFO replay of [`LeaderState::propagate_subscribe`] from
/// `origin`.
pub fn flood(graph: &ClusterGraph, origin: ClusterId) -> FloodOutcome {
    let request = RequestId {
        issuer: GatewayId(u32::MAX),
        counter: 0,
    };
    let mut leaders: Vec<LeaderState> = graph
        .clusters()
        .map(|c| LeaderState::new(c, GatewayId(c.0), graph))
        .collect();
    let mut deliveries = vec![(origin, 0)];
    let mut parents = BTreeMap::from([(origin, None)]);
    let mut queue: VecDeque<(ClusterId, InterClusterMessage<()>, usize)> = leaders[origin.index()]
        .propagate_subscribe(request, ())
        .into_iter()
        .map(|(to, m)| (to, m, 1))
        .collect();
    let mut messages = queue.len();
    let mut duplicates = 0;
    while let Some((to, msg, depth)) = queue.pop_front() {
        let leader = &mut leaders[to.index()];
        match leader.forward(msg).expect("flood never fails") {
            ForwardAction::Deliver(m) => {
                deliveries.push((to, depth));
                parents.insert(to, leader.flood_parent(request).flatten());
                let onward = leader.flood_onward(&m);
                messages += onward.len();
                queue.extend(onward.into_iter().map(|(n, m)| (n, m, depth + 1)));
            }
            ForwardAction::Duplicate => duplicates += 1,
            ForwardAction::Relay(_) => unreachable!("floods are delivered, not relayed"),
        }
    }
    FloodOutcome {
        deliveries,
        parents,
        messages,
        duplicates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(i: u32) -> ClusterId {
        ClusterId(i)
    }

    #[test]
    fn trivial_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = generate_cluster_graph(
            GraphParams {
                n1: 1,
                p1: 0.5,
                n2: 1,
                p2: 0.5,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.edges().is_empty());
        let g = generate_cluster_graph(
            GraphParams {
                n1: 2,
                p1: 1.0,
                n2: 1,
                p2: 0.5,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(g.edges(), vec![(c(0), c(1))]);
    }

    #[test]
    fn generation_rejects_bad_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_cluster_graph(
            GraphParams {
                n1: 0,
                p1: 0.5,
                n2: 1,
                p2: 0.5
            },
            &mut rng
        )
        .is_err());
        assert!(generate_cluster_graph(
            GraphParams {
                n1: 2,
                p1: 0.0,
                n2: 1,
                p2: 0.5
            },
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn generated_graphs_are_connected_and_deterministic() {
        let params = GraphParams {
            n1: 4,
            p1: 0.6,
            n2: 3,
            p2: 0.7,
        };
        let a = generate_cluster_graph(params, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate_cluster_graph(params, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_connected());
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn leader_is_argmin_occupation() {
        let g = |i| GatewayId(i);
        assert_eq!(elect_leader(&[(g(4), 0.9)]), Some(g(4)));
        assert_eq!(elect_leader(&[(g(3), 0.2), (g(1), 0.2), (g(2), 0.2)]), Some(g(1)));
        assert_eq!(elect_leader(&[(g(0), 0.4), (g(1), 0.1), (g(2), 0.3)]), Some(g(1)));
        assert_eq!(elect_leader(&[]), None);
    }

    #[test]
    fn routes() {
        let line = ClusterGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(build_route(c(1), c(1), &line).unwrap(), vec![c(1)]);
        assert_eq!(build_route(c(0), c(2), &line).unwrap(), vec![c(0), c(1), c(2)]);
        // square 0-1-3, 0-2-3: lexicographically smallest middle hop
        let square = ClusterGraph::from_edges(4, &[(0, 2), (2, 3), (0, 1), (1, 3)]).unwrap();
        assert_eq!(build_route(c(0), c(3), &square).unwrap(), vec![c(0), c(1), c(3)]);
        let split = ClusterGraph::from_edges(2, &[]).unwrap();
        assert!(matches!(build_route(c(0), c(1), &split), Err(Error::NoRoute { .. })));
    }

    #[test]
    fn line_flood_depth_order() {
        let line = ClusterGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let out = flood(&line, c(0));
        assert_eq!(out.deliveries, vec![(c(0), 0), (c(1), 1), (c(2), 2)]);
        assert_eq!(out.duplicates, 0);
    }

    #[test]
    fn cycle_flood_has_no_echo() {
        let cycle = ClusterGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let out = flood(&cycle, c(0));
        assert_eq!(out.deliveries.len(), 4);
        // the two branches meet on the 2-3 edge: one dropped copy each way
        assert_eq!(out.duplicates, 2);
        assert_eq!(out.messages, 5);
        assert_eq!(out.parents[&c(2)], Some(c(1)));
        let single = ClusterGraph::from_edges(1, &[]).unwrap();
        let out = flood(&single, c(0));
        assert_eq!(out.deliveries, vec![(c(0), 0)]);
        assert_eq!(out.messages, 0);
    }

    #[test]
    fn transit_relays_once_and_destination_delivers() {
        let line = ClusterGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let mut leaders: Vec<_> = line
            .clusters()
            .map(|cl| LeaderState::new(cl, GatewayId(cl.0), &line))
            .collect();
        let action = leaders[0]
            .originate(
                InterKind::DeviceData,
                c(2),
                Some((DevEui(5), GatewayId(40))),
                "blob",
                &line,
            )
            .unwrap();
        assert_eq!(leaders[0].pending_sender_map[&DevEui(5)], GatewayId(40));
        let ForwardAction::Relay(mut hops) = action else {
            panic!()
        };
        assert_eq!(hops.len(), 1);
        let (next, msg) = hops.pop().unwrap();
        assert_eq!(next, c(1));
        let ForwardAction::Relay(mut hops) = leaders[1].forward(msg).unwrap() else {
            panic!()
        };
        assert_eq!(hops.len(), 1);
        let (next, msg) = hops.pop().unwrap();
        assert!(
            matches!(leaders[next.index()].forward(msg).unwrap(), ForwardAction::Deliver(m) if m.payload == "blob")
        );
    }

    #[test]
    fn forward_rejects_non_adjacent_hop() {
        let g = ClusterGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let mut l0 = LeaderState::new(c(0), GatewayId(0), &g);
        let msg = InterClusterMessage {
            kind: InterKind::DeviceData,
            origin: c(0),
            routing: Routing::Path {
                path: vec![c(0), c(2)],
                hop: 0,
            },
            payload: (),
        };
        assert!(matches!(l0.forward(msg), Err(Error::NotAdjacent { .. })));
    }

    #[test]
    fn handoff_keeps_routes_and_senders() {
        let line = ClusterGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let mut l = LeaderState::new(c(0), GatewayId(1), &line);
        l.originate(
            InterKind::PublishMatch,
            c(2),
            Some((DevEui(9), GatewayId(3))),
            (),
            &line,
        )
        .unwrap();
        assert!(l.handoff(GatewayId(2)));
        assert_eq!(l.term, 1);
        assert_eq!(l.leader_gateway, GatewayId(2));
        assert_eq!(l.route_cache[&c(2)], vec![c(0), c(1), c(2)]);
        assert_eq!(l.pending_sender_map[&DevEui(9)], GatewayId(3));
        assert!(!l.handoff(GatewayId(2)));
    }
}
