//! The simulator proper: end-devices, gateways running the overlay stack,
//! the cluster bus and the radio medium, driven by one event loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::EventLog;
use super::queue::EventQueue;
use super::setup::{DeviceSpec, HandlingPolicy, SimSetup};
use crate::admin::{Decrypted, DeviceIdentity, KeyRing, OwnerAdmin, SealedPayload, SessionKeys};
use crate::consensus::{
    assign_channel, assign_sf, ConsensusRound, HandledSet, HandlerProposal, PlacementMode, Registration,
};
use crate::error::{Error, Result};
use crate::ids::{ActorId, ClusterId, DevEui, GatewayId, RequestId};
use crate::intercluster::{elect_leader, ForwardAction, InterClusterMessage, InterKind, LeaderState};
use crate::membership::{GatewayMembership, OccupancyTracker, PeerExchange, ProfileChange};
use crate::pubsub::{Ack, Dissemination, DisseminationStep, PubSubStore, SubscribeOutcome, SubscribeRecord};
use crate::radio::{
    in_range, rssi_at, time_on_air, Channel, DutyCycleBudget, DutyDecision, Frame, FrameId, FrameKind, GatewayReceiver,
    ReceptionStatus, Settled, SpreadingFactor,
};

const STREAM_PROTOCOL: u64 = 3;

/// Outcome counters of one run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Devices that sent at least one join request.
    pub join_attempts: u64,
    /// Devices that completed at least one join.
    pub join_successes: u64,
    pub join_ratio: f64,
    pub collisions: u64,
    /// Data uplinks transmitted.
    pub frames_sent: u64,
    /// Data uplinks decrypted by the owner or active renter.
    pub frames_delivered_to_owner: u64,
    pub join_requests: u64,
    pub accepts_sent: u64,
    pub accepts_dropped: u64,
    pub unheard_frames: u64,
    pub inter_cluster_messages: u64,
}

impl RunMetrics {
    pub fn finalize(&mut self) {
        self.join_ratio = if self.join_attempts == 0 {
            0.0
        } else {
            self.join_successes as f64 / self.join_attempts as f64
        };
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum DevState {
    Idle,
    /// `frame` is the join request awaiting an answer, if any.
    Joining {
        frame: Option<FrameId>,
    },
    Joined {
        handler: GatewayId,
        channel: Channel,
        sf: SpreadingFactor,
        keys: SessionKeys,
        since: f64,
    },
}

#[derive(Debug, Clone)]
struct Device {
    spec: DeviceSpec,
    duty: DutyCycleBudget,
    state: DevState,
    gen: u64,
    failures: u32,
    join_sf: SpreadingFactor,
    attempted: bool,
    joined_once: bool,
    counter: u64,
}

#[derive(Debug, Clone, Copy)]
struct PendingJoin {
    join: FrameId,
    join_end: f64,
    join_channel: Channel,
    join_sf: SpreadingFactor,
    channel: Channel,
    sf: SpreadingFactor,
    session: Option<u32>,
}

#[derive(Debug, Clone)]
struct ConsensusCtx {
    round: ConsensusRound,
    record: SubscribeRecord,
    join_end: f64,
    join_channel: Channel,
    join_sf: SpreadingFactor,
}

#[derive(Debug, Clone)]
struct Gateway {
    id: GatewayId,
    actor: ActorId,
    cluster: ClusterId,
    position: crate::ids::Position,
    receiver: GatewayReceiver,
    occupancy: OccupancyTracker,
    membership: GatewayMembership,
    pubsub: PubSubStore,
    keyring: KeyRing,
    handled: HandledSet,
    downlink: DutyCycleBudget,
    consensus: BTreeMap<(DevEui, FrameId), ConsensusCtx>,
    disseminations: BTreeMap<RequestId, Dissemination>,
    pending_joins: BTreeMap<DevEui, PendingJoin>,
    deliver_to: BTreeMap<DevEui, GatewayId>,
    gossip_pending: bool,
}

#[derive(Debug, Clone)]
struct FrameMeta {
    end: f64,
    channel: Channel,
    sf: SpreadingFactor,
    sealed: Option<SealedPayload>,
    hearers: Vec<(GatewayId, f64)>,
}

#[derive(Debug, Clone)]
enum KeyRole {
    Handler { join: FrameId, deliver_to: GatewayId },
    Renter,
}

#[derive(Debug, Clone)]
enum Msg {
    GossipRequest(PeerExchange),
    GossipReply(PeerExchange),
    SubscribeForward {
        from: GatewayId,
        record: SubscribeRecord,
    },
    SubscribeAck {
        request: RequestId,
        ack: Ack,
    },
    SubscribeFlood(SubscribeRecord),
    Proposals {
        dev: DevEui,
        join: FrameId,
        proposals: Vec<HandlerProposal>,
    },
    PublishMatch {
        dev: DevEui,
        handler: GatewayId,
        join: FrameId,
    },
    KeyMaterial {
        dev: DevEui,
        keys: SessionKeys,
        role: KeyRole,
    },
    Release {
        dev: DevEui,
        session: u32,
    },
    /// The owner already accepted another handler for this join.
    MatchRejected {
        dev: DevEui,
        join: FrameId,
    },
    DeviceData {
        dev: DevEui,
        frame: FrameId,
        sealed: SealedPayload,
    },
    Outbound {
        dest_cluster: ClusterId,
        dest_gw: GatewayId,
        origin_gw: GatewayId,
        kind: InterKind,
        dev: Option<DevEui>,
        inner: Box<Msg>,
    },
}

impl Msg {
    fn inter_kind(&self) -> InterKind {
        match self {
            Msg::PublishMatch { .. } => InterKind::PublishMatch,
            Msg::KeyMaterial { .. } | Msg::Release { .. } | Msg::MatchRejected { .. } => InterKind::KeyMaterial,
            Msg::DeviceData { .. } => InterKind::DeviceData,
            _ => InterKind::SubscribeFlood,
        }
    }

    fn dev(&self) -> Option<DevEui> {
        match self {
            Msg::PublishMatch { dev, .. }
            | Msg::KeyMaterial { dev, .. }
            | Msg::Release { dev, .. }
            | Msg::MatchRejected { dev, .. }
            | Msg::DeviceData { dev, .. }
            | Msg::Proposals { dev, .. } => Some(*dev),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
enum InterPayload {
    Routed { dest_gw: GatewayId, msg: Box<Msg> },
    Subscribe(SubscribeRecord),
}

#[derive(Debug, Clone)]
enum Event {
    DeviceWake {
        dev: DevEui,
        gen: u64,
    },
    RadioTxStart {
        frame: Frame,
    },
    RadioRxComplete {
        gw: GatewayId,
        channel: Channel,
    },
    JoinDecision {
        dev: DevEui,
        join: FrameId,
    },
    JoinTimeout {
        dev: DevEui,
        gen: u64,
    },
    ConsensusTimer {
        gw: GatewayId,
        dev: DevEui,
        join: FrameId,
        round: u32,
    },
    RxWindow {
        gw: GatewayId,
        dev: DevEui,
        join: FrameId,
        window: u8,
    },
    AcceptDelivery {
        dev: DevEui,
        join: FrameId,
        handler: GatewayId,
        session: u32,
    },
    GossipTick {
        gw: GatewayId,
        periodic: bool,
    },
    LeaderTick,
    PubSubExpiryTick {
        gw: GatewayId,
    },
    Housekeeping,
    Delegate {
        index: usize,
    },
    ClusterMessageDelivery {
        to: GatewayId,
        msg: Msg,
    },
    InterClusterDelivery {
        cluster: ClusterId,
        msg: InterClusterMessage<InterPayload>,
    },
}

pub struct Simulator {
    setup: SimSetup,
    queue: EventQueue<Event>,
    rng: ChaCha8Rng,
    gateways: Vec<Gateway>,
    devices: Vec<Device>,
    admins: BTreeMap<ActorId, OwnerAdmin>,
    leaders: Vec<LeaderState>,
    cluster_members: Vec<Vec<GatewayId>>,
    last_handler: BTreeMap<DevEui, GatewayId>,
    /// Latest join request each device's owner has accepted a handler for.
    matched: BTreeMap<DevEui, FrameId>,
    frames: BTreeMap<FrameId, FrameMeta>,
    next_frame: u64,
    accept_max_airtime: f64,
    log: EventLog,
    metrics: RunMetrics,
    watermark: f64,
}

impl Simulator {
    pub fn new(setup: SimSetup, record_log: bool) -> Result<Self> {
        validate_setup(&setup)?;
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        rng.set_stream(STREAM_PROTOCOL);

        let mut cluster_members = vec![Vec::new(); setup.graph.len()];
        for g in &setup.gateways {
            cluster_members[g.cluster.index()].push(g.id);
        }

        let mut gateways: Vec<Gateway> = setup
            .gateways
            .iter()
            .map(|g| Gateway {
                id: g.id,
                actor: g.actor,
                cluster: g.cluster,
                position: g.position,
                receiver: GatewayReceiver::default(),
                occupancy: OccupancyTracker::new(setup.protocol.occupancy_window),
                membership: GatewayMembership::new(g.id, setup.membership),
                pubsub: PubSubStore::new(g.id),
                keyring: KeyRing::default(),
                handled: HandledSet::default(),
                downlink: DutyCycleBudget::new(setup.protocol.gateway_duty),
                consensus: BTreeMap::new(),
                disseminations: BTreeMap::new(),
                pending_joins: BTreeMap::new(),
                deliver_to: BTreeMap::new(),
                gossip_pending: false,
            })
            .collect();

        // bootstrap: a random sample of the cluster plus the devices in range
        let floor = setup.sensitivity.floor();
        for gw in &mut gateways {
            let members = &cluster_members[gw.cluster.index()];
            gw.membership.seed(members, &mut rng);
            let heard = setup
                .devices
                .iter()
                .map(|d| {
                    (
                        d.dev_eui,
                        rssi_at(d.position, gw.position, setup.protocol.tx_power_dbm, &setup.path),
                    )
                })
                .filter(|&(_, r)| r >= floor)
                .collect();
            gw.membership.set_profile_devices(heard);
        }

        let mut admins: BTreeMap<ActorId, OwnerAdmin> = BTreeMap::new();
        for g in &setup.gateways {
            admins.entry(g.actor).or_insert_with(|| OwnerAdmin::new(g.actor));
        }
        for d in &setup.devices {
            admins
                .entry(d.owner)
                .or_insert_with(|| OwnerAdmin::new(d.owner))
                .enroll(DeviceIdentity::generate(d.dev_eui, d.owner, setup.seed));
        }

        let leaders = cluster_members
            .iter()
            .enumerate()
            .map(|(c, members)| {
                let leader = members.iter().min().copied().unwrap_or(GatewayId(u32::MAX));
                LeaderState::new(ClusterId(c as u32), leader, &setup.graph)
            })
            .collect();

        let devices = setup
            .devices
            .iter()
            .map(|d| Device {
                spec: *d,
                duty: DutyCycleBudget::new(d.duty_limit),
                state: DevState::Idle,
                gen: 0,
                failures: 0,
                join_sf: SpreadingFactor::SF7,
                attempted: false,
                joined_once: false,
                counter: 0,
            })
            .collect();

        let accept_max_airtime = time_on_air(setup.protocol.join_payload, SpreadingFactor::SF12, &setup.phy)?;

        Ok(Self {
            queue: EventQueue::new(),
            rng,
            gateways,
            devices,
            admins,
            leaders,
            cluster_members,
            last_handler: BTreeMap::new(),
            matched: BTreeMap::new(),
            frames: BTreeMap::new(),
            next_frame: 0,
            accept_max_airtime,
            log: EventLog::new(record_log),
            metrics: RunMetrics::default(),
            watermark: 0.0,
            setup,
        })
    }

    /// Runs to the horizon and returns metrics plus the event log.
    pub fn run(mut self) -> Result<RunOutput> {
        self.bootstrap()?;
        let horizon = self.setup.duration;
        while let Some(t) = self.queue.peek_time() {
            if t > horizon {
                break;
            }
            let (time, _, event) = self.queue.pop().expect("peeked");
            assert!(time >= self.watermark, "event order violated");
            self.watermark = time;
            self.handle(event)?;
        }
        self.check_invariants()?;
        self.metrics.join_attempts = self.devices.iter().filter(|d| d.attempted).count() as u64;
        self.metrics.join_successes = self.devices.iter().filter(|d| d.joined_once).count() as u64;
        self.metrics.finalize();
        Ok(RunOutput {
            metrics: self.metrics,
            log: self.log.into_lines(),
        })
    }

    fn now(&self) -> f64 {
        self.queue.now()
    }

    fn schedule(&mut self, time: f64, event: Event) {
        self.queue.schedule(time, event);
    }

    fn federated(&self) -> bool {
        self.setup.policy == HandlingPolicy::Federated
    }

    fn gw(&self, id: GatewayId) -> &Gateway {
        &self.gateways[id.index()]
    }

    fn gw_mut(&mut self, id: GatewayId) -> &mut Gateway {
        &mut self.gateways[id.index()]
    }

    fn bootstrap(&mut self) -> Result<()> {
        let ids: Vec<GatewayId> = self.gateways.iter().map(|g| g.id).collect();
        self.schedule(0.0, Event::LeaderTick);
        for &g in &ids {
            self.schedule(0.0, Event::GossipTick { gw: g, periodic: true });
            let sweep = self.setup.pubsub.sweep_period;
            self.schedule(sweep, Event::PubSubExpiryTick { gw: g });
        }
        self.schedule(self.setup.protocol.housekeeping_period, Event::Housekeeping);
        if self.federated() {
            let subs: Vec<(GatewayId, DevEui)> = self
                .devices
                .iter()
                .map(|d| (d.spec.owner_gateway, d.spec.dev_eui))
                .collect();
            for (owner, dev) in subs {
                self.issue_subscribe(owner, dev, None);
            }
        }
        for i in 0..self.setup.delegations.len() {
            let at = self.setup.delegations[i].at;
            self.schedule(at, Event::Delegate { index: i });
        }
        for d in 0..self.devices.len() {
            let first = self.devices[d].spec.first_wake;
            let dev = self.devices[d].spec.dev_eui;
            self.schedule(first, Event::DeviceWake { dev, gen: 0 });
        }
        Ok(())
    }

    fn handle(&mut self, event: Event) -> Result<()> {
        match event {
            Event::DeviceWake { dev, gen } => self.on_device_wake(dev, gen),
            Event::RadioTxStart { frame } => self.on_tx_start(frame),
            Event::RadioRxComplete { gw, channel } => {
                let now = self.now();
                if let Some(s) = self.gw_mut(gw).receiver.complete(channel, now) {
                    self.on_settled(gw, s)?;
                }
                Ok(())
            }
            Event::JoinDecision { dev, join } => self.on_join_decision(dev, join),
            Event::JoinTimeout { dev, gen } => {
                self.on_join_timeout(dev, gen);
                Ok(())
            }
            Event::ConsensusTimer { gw, dev, join, round } => self.on_consensus_timer(gw, dev, join, round),
            Event::RxWindow { gw, dev, join, window } => self.on_rx_window(gw, dev, join, window),
            Event::AcceptDelivery {
                dev,
                join,
                handler,
                session,
            } => {
                self.on_accept_delivery(dev, join, handler, session);
                Ok(())
            }
            Event::GossipTick { gw, periodic } => {
                self.on_gossip_tick(gw, periodic);
                Ok(())
            }
            Event::LeaderTick => {
                self.on_leader_tick();
                Ok(())
            }
            Event::PubSubExpiryTick { gw } => {
                self.on_expiry_tick(gw);
                Ok(())
            }
            Event::Housekeeping => {
                self.on_housekeeping();
                Ok(())
            }
            Event::Delegate { index } => self.on_delegate(index),
            Event::ClusterMessageDelivery { to, msg } => self.on_message(to, msg),
            Event::InterClusterDelivery { cluster, msg } => self.on_inter_delivery(cluster, msg),
        }
    }

    // ---------------------------------------------------------------- devices

    fn on_device_wake(&mut self, dev: DevEui, gen: u64) -> Result<()> {
        let d = &self.devices[dev.index()];
        if d.gen != gen {
            return Ok(());
        }
        match &d.state {
            DevState::Idle | DevState::Joining { frame: None } => self.send_join(dev),
            DevState::Joining { frame: Some(_) } => Ok(()),
            DevState::Joined { since, .. } => {
                if self.now() - since >= d.spec.rejoin_period {
                    self.log_dev(dev, "rejoin", format_args!(""));
                    let d = &mut self.devices[dev.index()];
                    if let DevState::Joined { sf, .. } = d.state {
                        d.join_sf = sf;
                    }
                    d.state = DevState::Joining { frame: None };
                    d.failures = 0;
                    self.send_join(dev)
                } else {
                    self.send_data(dev)
                }
            }
        }
    }

    fn new_frame_id(&mut self) -> FrameId {
        let id = FrameId(self.next_frame);
        self.next_frame += 1;
        id
    }

    fn try_duty(&mut self, dev: DevEui, airtime: f64) -> bool {
        let now = self.now();
        let d = &mut self.devices[dev.index()];
        match d.duty.consume(airtime, now) {
            DutyDecision::Allowed => true,
            DutyDecision::Deferred(t) => {
                let gen = d.gen;
                self.log_dev(dev, "deferred", format_args!("until={t:.6}"));
                if t.is_finite() {
                    self.schedule(t, Event::DeviceWake { dev, gen });
                }
                false
            }
        }
    }

    fn send_join(&mut self, dev: DevEui) -> Result<()> {
        let channel = Channel::new(self.rng.gen_range(0..Channel::COUNT as u8))?;
        let d = &self.devices[dev.index()];
        let sf = d.join_sf;
        let (position, gen) = (d.spec.position, d.gen);
        let id = self.new_frame_id();
        let frame = Frame::new(
            id,
            FrameKind::JoinRequest,
            dev,
            channel,
            sf,
            self.setup.protocol.join_payload,
            self.now(),
            position,
            self.setup.protocol.tx_power_dbm,
            &self.setup.phy,
        )?;
        if !self.try_duty(dev, frame.airtime) {
            return Ok(());
        }
        let d = &mut self.devices[dev.index()];
        d.state = DevState::Joining { frame: Some(id) };
        d.attempted = true;
        self.metrics.join_requests += 1;
        self.log_tx(&frame);
        let timeout = frame.end() + self.setup.protocol.rx2_delay + self.accept_max_airtime + 0.5;
        self.schedule(timeout, Event::JoinTimeout { dev, gen });
        let now = self.now();
        self.schedule(now, Event::RadioTxStart { frame });
        Ok(())
    }

    fn send_data(&mut self, dev: DevEui) -> Result<()> {
        let d = &self.devices[dev.index()];
        let DevState::Joined { channel, sf, keys, .. } = d.state else {
            return Ok(());
        };
        let (payload, position) = (d.spec.payload_size, d.spec.position);
        let id = self.new_frame_id();
        let frame = Frame::new(
            id,
            FrameKind::DataUplink,
            dev,
            channel,
            sf,
            payload,
            self.now(),
            position,
            self.setup.protocol.tx_power_dbm,
            &self.setup.phy,
        )?;
        if !self.try_duty(dev, frame.airtime) {
            return Ok(());
        }
        let d = &mut self.devices[dev.index()];
        d.counter += 1;
        let sealed = SealedPayload::seal(dev, &keys, d.counter);
        let (period, gen) = (d.spec.uplink_period, d.gen);
        self.metrics.frames_sent += 1;
        self.log_tx(&frame);
        self.frames.insert(
            id,
            FrameMeta {
                end: frame.end(),
                channel: frame.channel,
                sf: frame.sf,
                sealed: Some(sealed),
                hearers: Vec::new(),
            },
        );
        let now = self.now();
        self.schedule(now + period, Event::DeviceWake { dev, gen });
        self.schedule(now, Event::RadioTxStart { frame });
        Ok(())
    }

    fn on_join_timeout(&mut self, dev: DevEui, gen: u64) {
        let p = self.setup.protocol;
        let d = &mut self.devices[dev.index()];
        if d.gen != gen || !matches!(d.state, DevState::Joining { frame: Some(_) }) {
            return;
        }
        d.failures += 1;
        d.join_sf = d.join_sf.step_up();
        d.state = DevState::Joining { frame: None };
        let base = (p.backoff_base * 2f64.powi(d.failures as i32 - 1)).min(p.backoff_cap);
        let jitter = 1.0 + p.backoff_jitter * (2.0 * self.rng.gen::<f64>() - 1.0);
        let delay = base * jitter;
        let (failures, sf) = (d.failures, d.join_sf);
        self.log_dev(
            dev,
            "join_failed",
            format_args!("attempt={failures} retry_in={delay:.6} next_sf={}", sf.value()),
        );
        let now = self.now();
        self.schedule(now + delay, Event::DeviceWake { dev, gen });
    }

    fn on_accept_delivery(&mut self, dev: DevEui, join: FrameId, handler: GatewayId, session: u32) {
        let now = self.now();
        let d = &self.devices[dev.index()];
        if d.state != (DevState::Joining { frame: Some(join) }) {
            self.log_dev(dev, "accept_ignored", format_args!("join={}", join.0));
            return;
        }
        let owner = d.spec.owner;
        let Some(keys) = self.admins[&owner].session(dev).copied() else {
            return;
        };
        if keys.session_id != session {
            self.log_dev(dev, "accept_ignored", format_args!("join={}", join.0));
            return;
        }
        let Some(reg) = self.gw(handler).handled.get(dev).copied() else {
            return;
        };
        let d = &mut self.devices[dev.index()];
        d.state = DevState::Joined {
            handler,
            channel: reg.channel,
            sf: reg.sf,
            keys,
            since: now,
        };
        d.gen += 1;
        d.failures = 0;
        d.joined_once = true;
        let (gen, period) = (d.gen, d.spec.uplink_period);
        self.log_dev(
            dev,
            "joined",
            format_args!(
                "handler={handler} ch={} sf={} session={session}",
                reg.channel.index(),
                reg.sf.value()
            ),
        );
        let first = now + self.rng.gen_range(0.0..period);
        self.schedule(first, Event::DeviceWake { dev, gen });
    }

    // ------------------------------------------------------------------ radio

    fn on_tx_start(&mut self, frame: Frame) -> Result<()> {
        let now = self.now();
        let mut heard = false;
        for i in 0..self.gateways.len() {
            let gw = &mut self.gateways[i];
            let rssi = rssi_at(frame.origin, gw.position, frame.tx_power_dbm, &self.setup.path);
            if !in_range(rssi, frame.sf, &self.setup.sensitivity) {
                continue;
            }
            heard = true;
            let id = gw.id;
            gw.occupancy.record(frame.channel, now, frame.airtime);
            let outcome = gw.receiver.begin_reception(frame.clone(), now);
            if let Some(s) = outcome.settled {
                self.on_settled(id, s)?;
            }
            if let ReceptionStatus::Collided { lost, blocking } = outcome.status {
                self.metrics.collisions += 1;
                let lost: Vec<String> = lost.iter().map(|f| f.0.to_string()).collect();
                self.log.push(
                    now,
                    id,
                    "collision",
                    format_args!(
                        "ch={} lost={} blocking={}",
                        frame.channel.index(),
                        lost.join(","),
                        blocking.0
                    ),
                );
            }
            self.schedule(
                frame.end(),
                Event::RadioRxComplete {
                    gw: id,
                    channel: frame.channel,
                },
            );
        }
        if !heard {
            self.metrics.unheard_frames += 1;
            self.log_dev(frame.dev_eui, "unheard", format_args!("frame={}", frame.id.0));
        }
        if frame.kind == FrameKind::JoinRequest {
            self.frames.insert(
                frame.id,
                FrameMeta {
                    end: frame.end(),
                    channel: frame.channel,
                    sf: frame.sf,
                    sealed: None,
                    hearers: Vec::new(),
                },
            );
            if !self.federated() {
                self.schedule(
                    frame.end(),
                    Event::JoinDecision {
                        dev: frame.dev_eui,
                        join: frame.id,
                    },
                );
            }
        }
        Ok(())
    }

    fn on_settled(&mut self, gw: GatewayId, s: Settled) -> Result<()> {
        let now = self.now();
        let frame = s.frame;
        if !s.delivered {
            self.log.push(now, gw, "rx_lost", format_args!("frame={}", frame.id.0));
            return Ok(());
        }
        let g = self.gw(gw);
        let rssi = rssi_at(frame.origin, g.position, frame.tx_power_dbm, &self.setup.path);
        self.log.push(
            now,
            gw,
            "rx",
            format_args!(
                "frame={} dev={} type={} rssi={rssi:.3}",
                frame.id.0,
                frame.dev_eui,
                frame.kind.label()
            ),
        );
        let change = self.gw_mut(gw).membership.observe(frame.dev_eui, rssi, now);
        if change == ProfileChange::Appeared {
            self.request_gossip(gw);
        }
        match frame.kind {
            FrameKind::JoinRequest => {
                if let Some(meta) = self.frames.get_mut(&frame.id) {
                    meta.hearers.push((gw, rssi));
                }
                if self.federated() {
                    self.start_consensus(gw, &frame, rssi);
                }
            }
            FrameKind::DataUplink => self.handle_uplink(gw, &frame)?,
            FrameKind::JoinAccept | FrameKind::Downlink => {}
        }
        Ok(())
    }

    fn handle_uplink(&mut self, gw: GatewayId, frame: &Frame) -> Result<()> {
        let dev = frame.dev_eui;
        let Some(sealed) = self.frames.get(&frame.id).and_then(|m| m.sealed.clone()) else {
            return Ok(());
        };
        let g = self.gw(gw);
        let Some(reg) = g.handled.get(dev) else {
            return Ok(());
        };
        let holds_nwk = g.keyring.nwk(dev).is_some_and(|k| k.session_id == sealed.session_id);
        if reg.session_id != sealed.session_id || !holds_nwk {
            return Ok(());
        }
        let Some(&target) = g.deliver_to.get(&dev) else {
            return Ok(());
        };
        // a handler forwarding to itself is the owner or renter gateway and
        // reads the payload on delivery
        if target != gw {
            self.log_decrypt(gw, &sealed, "handler");
        }
        self.log.push(
            self.now(),
            gw,
            "forward",
            format_args!("dev={dev} frame={} to={target}", frame.id.0),
        );
        self.send(
            gw,
            target,
            Msg::DeviceData {
                dev,
                frame: frame.id,
                sealed,
            },
        );
        Ok(())
    }

    fn log_decrypt(&mut self, gw: GatewayId, sealed: &SealedPayload, role: &str) -> Decrypted {
        let result = self.gw(gw).keyring.decrypt_app_payload(sealed);
        let label = match result {
            Decrypted::Payload(_) => "payload",
            Decrypted::Opaque => "opaque",
        };
        self.log.push(
            self.now(),
            gw,
            "decrypt",
            format_args!(
                "dev={} session={} role={role} result={label}",
                sealed.dev_eui, sealed.session_id
            ),
        );
        result
    }

    // -------------------------------------------------------------- handling

    fn on_join_decision(&mut self, dev: DevEui, join: FrameId) -> Result<()> {
        let Some(meta) = self.frames.get(&join) else {
            return Ok(());
        };
        let owner = self.devices[dev.index()].spec.owner;
        let (join_end, channel, sf) = (meta.end, meta.channel, meta.sf);
        let candidates: Vec<(GatewayId, f64)> = meta
            .hearers
            .iter()
            .copied()
            .filter(|&(g, _)| self.gw(g).actor == owner)
            .collect();
        let best = candidates
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some((winner, rssi)) = best else {
            self.log.push(
                self.now(),
                format!("actor{}", owner.0),
                "no_handler",
                format_args!("dev={dev} join={}", join.0),
            );
            return Ok(());
        };
        let cluster = self.gw(winner).cluster;
        self.log.push(
            self.now(),
            winner,
            "decide",
            format_args!(
                "dev={dev} join={} cl={cluster} winner={winner} participants={}",
                join.0,
                candidates.len()
            ),
        );
        let owner_gateway = self.devices[dev.index()].spec.owner_gateway;
        self.become_handler(
            winner,
            dev,
            join,
            rssi,
            join_end,
            channel,
            sf,
            owner_gateway,
            PlacementMode::Selfish,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn become_handler(
        &mut self,
        gw: GatewayId,
        dev: DevEui,
        join: FrameId,
        rssi: f64,
        join_end: f64,
        join_channel: Channel,
        join_sf: SpreadingFactor,
        owner_gateway: GatewayId,
        mode: PlacementMode,
    ) -> Result<()> {
        let now = self.now();
        let p = self.setup.protocol;
        let sf = assign_sf(rssi, &self.setup.sensitivity, p.sf_margin_db);
        let airtime = time_on_air(p.expected_payload, sf, &self.setup.phy)?;
        let duty = self.devices[dev.index()].spec.duty_limit;
        let projected = (airtime / p.expected_period).min(duty);
        let g = self.gw_mut(gw);
        let own = g.occupancy.occupation(now);
        let neighbors: Vec<[f64; Channel::COUNT]> = g
            .membership
            .neighbor_profiles()
            .iter()
            .map(|p| p.channel_occupation)
            .collect();
        let channel = assign_channel(&own, &neighbors, projected, mode);
        g.occupancy.reserve(dev, channel, projected, now);
        g.pending_joins.insert(
            dev,
            PendingJoin {
                join,
                join_end,
                join_channel,
                join_sf,
                channel,
                sf,
                session: None,
            },
        );
        self.log.push(
            now,
            gw,
            "candidate",
            format_args!(
                "dev={dev} join={} ch={} sf={} owner={owner_gateway}",
                join.0,
                channel.index(),
                sf.value()
            ),
        );
        self.send(gw, owner_gateway, Msg::PublishMatch { dev, handler: gw, join });
        Ok(())
    }

    fn start_consensus(&mut self, gw: GatewayId, frame: &Frame, rssi: f64) {
        let now = self.now();
        let dev = frame.dev_eui;
        let g = self.gw_mut(gw);
        let Some(record) = g.pubsub.on_join_request(dev, rssi, now) else {
            self.log
                .push(now, gw, "join_ignored", format_args!("dev={dev} join={}", frame.id.0));
            return;
        };
        let occ = g.occupancy.occupation(now);
        let proposal = HandlerProposal {
            gateway_id: gw,
            occupation: occ.iter().sum::<f64>() / Channel::COUNT as f64,
            rssi,
            pending_load: g.handled.len() as u32,
        };
        g.consensus.insert(
            (dev, frame.id),
            ConsensusCtx {
                round: ConsensusRound::new(dev, frame.id.0 as u32, proposal),
                record,
                join_end: frame.end(),
                join_channel: frame.channel,
                join_sf: frame.sf,
            },
        );
        self.log.push(
            now,
            gw,
            "consensus_start",
            format_args!("dev={dev} join={} owner={}", frame.id.0, record.owner_gateway),
        );
        let dt = self.setup.protocol.round_time;
        self.schedule(
            now + dt,
            Event::ConsensusTimer {
                gw,
                dev,
                join: frame.id,
                round: 1,
            },
        );
    }

    fn on_consensus_timer(&mut self, gw: GatewayId, dev: DevEui, join: FrameId, round: u32) -> Result<()> {
        let now = self.now();
        let rounds = self.setup.protocol.consensus_rounds;
        let dt = self.setup.protocol.round_time;
        if round <= rounds {
            let g = self.gw_mut(gw);
            let Some(ctx) = g.consensus.get_mut(&(dev, join)) else {
                return Ok(());
            };
            let proposals = ctx.round.outgoing();
            let peers = g.membership.peers();
            for p in peers {
                self.send(
                    gw,
                    p,
                    Msg::Proposals {
                        dev,
                        join,
                        proposals: proposals.clone(),
                    },
                );
            }
            self.schedule(
                now + dt,
                Event::ConsensusTimer {
                    gw,
                    dev,
                    join,
                    round: round + 1,
                },
            );
            return Ok(());
        }
        let weights = self.setup.weights;
        let Some(mut ctx) = self.gw_mut(gw).consensus.remove(&(dev, join)) else {
            return Ok(());
        };
        let winner = ctx.round.decide(&weights);
        let cluster = self.gw(gw).cluster;
        self.log.push(
            now,
            gw,
            "decide",
            format_args!(
                "dev={dev} join={} cl={cluster} winner={winner} participants={}",
                join.0,
                ctx.round.proposals.len()
            ),
        );
        if ctx.round.is_winner() {
            let rssi = ctx.round.proposals[&gw].rssi;
            self.become_handler(
                gw,
                dev,
                join,
                rssi,
                ctx.join_end,
                ctx.join_channel,
                ctx.join_sf,
                ctx.record.owner_gateway,
                self.setup.placement,
            )?;
        }
        Ok(())
    }

    fn on_rx_window(&mut self, gw: GatewayId, dev: DevEui, join: FrameId, window: u8) -> Result<()> {
        let now = self.now();
        let p = self.setup.protocol;
        let Some(pending) = self.gw(gw).pending_joins.get(&dev).copied() else {
            return Ok(());
        };
        if pending.join != join {
            return Ok(());
        }
        let Some(session) = pending.session else {
            return Ok(());
        };
        let sf = if window == 1 {
            pending.join_sf
        } else {
            SpreadingFactor::SF12
        };
        let airtime = time_on_air(p.join_payload, sf, &self.setup.phy)?;
        let g = self.gw_mut(gw);
        match g.downlink.consume(airtime, now) {
            DutyDecision::Allowed => {
                if window == 1 {
                    g.occupancy.record(pending.join_channel, now, airtime);
                }
                g.pending_joins.remove(&dev);
                self.metrics.accepts_sent += 1;
                self.log.push(
                    now,
                    gw,
                    "accept_tx",
                    format_args!(
                        "dev={dev} join={} session={session} window=rx{window} sf={} airtime={airtime:.6}",
                        join.0,
                        sf.value()
                    ),
                );
                self.schedule(
                    now + airtime,
                    Event::AcceptDelivery {
                        dev,
                        join,
                        handler: gw,
                        session,
                    },
                );
            }
            DutyDecision::Deferred(_) if window == 1 => {
                self.log
                    .push(now, gw, "accept_deferred", format_args!("dev={dev} join={}", join.0));
                self.schedule(
                    pending.join_end + p.rx2_delay,
                    Event::RxWindow {
                        gw,
                        dev,
                        join,
                        window: 2,
                    },
                );
            }
            DutyDecision::Deferred(_) => self.drop_accept(gw, dev, join, session),
        }
        Ok(())
    }

    fn drop_accept(&mut self, gw: GatewayId, dev: DevEui, join: FrameId, session: u32) {
        let now = self.now();
        let g = self.gw_mut(gw);
        g.pending_joins.remove(&dev);
        if g.handled.release(dev, session) {
            g.keyring.revoke_nwk(dev);
            g.deliver_to.remove(&dev);
        }
        g.occupancy.release(dev);
        self.metrics.accepts_dropped += 1;
        self.log.push(
            now,
            gw,
            "accept_drop",
            format_args!("dev={dev} join={} session={session}", join.0),
        );
    }

    // -------------------------------------------------------------- messages

    fn send(&mut self, from: GatewayId, to: GatewayId, msg: Msg) {
        let now = self.now();
        let (cf, ct) = (self.gw(from).cluster, self.gw(to).cluster);
        let lat = self.setup.protocol.intra_latency;
        if cf == ct {
            self.schedule(now + lat, Event::ClusterMessageDelivery { to, msg });
        } else {
            let leader = self.leaders[cf.index()].leader_gateway;
            let wrapped = Msg::Outbound {
                dest_cluster: ct,
                dest_gw: to,
                origin_gw: from,
                kind: msg.inter_kind(),
                dev: msg.dev(),
                inner: Box::new(msg),
            };
            self.schedule(
                now + lat,
                Event::ClusterMessageDelivery {
                    to: leader,
                    msg: wrapped,
                },
            );
        }
    }

    fn on_message(&mut self, to: GatewayId, msg: Msg) -> Result<()> {
        let now = self.now();
        match msg {
            Msg::GossipRequest(ex) => {
                let from = ex.from;
                let g = self.gw_mut(to);
                g.membership.absorb(&ex);
                let occ = g.occupancy.occupation(now);
                let reply = g.membership.exchange(occ, now);
                self.send(to, from, Msg::GossipReply(reply));
            }
            Msg::GossipReply(ex) => self.gw_mut(to).membership.absorb(&ex),
            Msg::SubscribeForward { from, record } => {
                let ack = self.gw_mut(to).pubsub.receive(record, now);
                self.send(
                    to,
                    from,
                    Msg::SubscribeAck {
                        request: record.request_id,
                        ack,
                    },
                );
                if ack == Ack::Stored {
                    self.start_dissemination(to, record);
                }
            }
            Msg::SubscribeAck { request, ack, .. } => {
                let params = self.setup.pubsub;
                let step = match self.gw_mut(to).disseminations.get_mut(&request) {
                    Some(d) => d.on_ack(ack, &params),
                    None => return Ok(()),
                };
                self.dissemination_step(to, request, step);
            }
            Msg::SubscribeFlood(record) => {
                let c = self.gw(to).cluster;
                let hops =
                    self.leaders[c.index()].propagate_subscribe(record.request_id, InterPayload::Subscribe(record));
                self.relay(hops);
            }
            Msg::Proposals { dev, join, proposals } => {
                if let Some(ctx) = self.gw_mut(to).consensus.get_mut(&(dev, join)) {
                    ctx.round.absorb(proposals);
                }
            }
            Msg::PublishMatch { dev, handler, join } => self.on_publish_match(to, dev, handler, join)?,
            Msg::KeyMaterial { dev, keys, role } => self.on_key_material(to, dev, keys, role),
            Msg::Release { dev, session } => {
                let g = self.gw_mut(to);
                if g.handled.release(dev, session) {
                    g.keyring.revoke_nwk(dev);
                    g.deliver_to.remove(&dev);
                    g.occupancy.release(dev);
                    self.log
                        .push(now, to, "release", format_args!("dev={dev} session={session}"));
                }
            }
            Msg::MatchRejected { dev, join } => {
                let g = self.gw_mut(to);
                if g.pending_joins.get(&dev).is_some_and(|p| p.join == join) {
                    g.pending_joins.remove(&dev);
                    if !g.handled.contains(dev) {
                        g.occupancy.release(dev);
                    }
                    self.log
                        .push(now, to, "match_lost", format_args!("dev={dev} join={}", join.0));
                }
            }
            Msg::DeviceData { dev, frame, sealed } => {
                let owner_gw = self.devices[dev.index()].spec.owner_gateway;
                let role = if to == owner_gw { "owner" } else { "renter" };
                if let Decrypted::Payload(_) = self.log_decrypt(to, &sealed, role) {
                    self.metrics.frames_delivered_to_owner += 1;
                    self.log.push(
                        now,
                        to,
                        "delivered",
                        format_args!("dev={dev} frame={} session={}", frame.0, sealed.session_id),
                    );
                }
            }
            Msg::Outbound {
                dest_cluster,
                dest_gw,
                origin_gw,
                kind,
                dev,
                inner,
            } => {
                let c = self.gw(to).cluster;
                let sender = match (kind, dev) {
                    (InterKind::PublishMatch, Some(d)) => Some((d, origin_gw)),
                    _ => None,
                };
                let payload = InterPayload::Routed { dest_gw, msg: inner };
                match self.leaders[c.index()].originate(kind, dest_cluster, sender, payload, &self.setup.graph) {
                    Ok(ForwardAction::Relay(hops)) => self.relay(hops),
                    Ok(ForwardAction::Deliver(_) | ForwardAction::Duplicate) => {}
                    Err(e) => {
                        self.log.push(
                            now,
                            c,
                            "route_error",
                            format_args!("{}", e.to_string().replace(' ', "_")),
                        );
                    }
                }
            }
        }
        Ok(())
    }

    fn relay(&mut self, hops: Vec<(ClusterId, InterClusterMessage<InterPayload>)>) {
        let now = self.now();
        let lat = self.setup.protocol.inter_latency;
        for (next, msg) in hops {
            self.metrics.inter_cluster_messages += 1;
            self.log
                .push(now, next, "inter_tx", format_args!("kind={:?}", msg.kind));
            self.schedule(now + lat, Event::InterClusterDelivery { cluster: next, msg });
        }
    }

    fn on_inter_delivery(&mut self, cluster: ClusterId, msg: InterClusterMessage<InterPayload>) -> Result<()> {
        let now = self.now();
        let leader_gw = self.leaders[cluster.index()].leader_gateway;
        if let InterPayload::Routed { dest_gw, msg: inner } = &msg.payload {
            if let Msg::DeviceData { sealed, .. } = inner.as_ref() {
                if *dest_gw != leader_gw {
                    let sealed = sealed.clone();
                    self.log_decrypt(leader_gw, &sealed, "transit");
                }
            }
        }
        let kind = msg.kind;
        self.log.push(
            now,
            cluster,
            "inter_rx",
            format_args!("kind={kind:?} leader={leader_gw}"),
        );
        match self.leaders[cluster.index()].forward(msg) {
            Ok(ForwardAction::Relay(hops)) => self.relay(hops),
            Ok(ForwardAction::Duplicate) => {}
            Ok(ForwardAction::Deliver(m)) => {
                let onward = self.leaders[cluster.index()].flood_onward(&m);
                match m.payload {
                    InterPayload::Routed { dest_gw, msg } => {
                        let target = match (msg.as_ref(), m.kind) {
                            (Msg::KeyMaterial { dev, .. }, InterKind::KeyMaterial) => self.leaders[cluster.index()]
                                .pending_sender_map
                                .get(dev)
                                .copied()
                                .filter(|&g| g == dest_gw)
                                .unwrap_or(dest_gw),
                            _ => dest_gw,
                        };
                        let lat = self.setup.protocol.intra_latency;
                        self.schedule(now + lat, Event::ClusterMessageDelivery { to: target, msg: *msg });
                    }
                    InterPayload::Subscribe(record) => {
                        let ack = self.gw_mut(leader_gw).pubsub.receive(record, now);
                        if ack == Ack::Stored {
                            self.start_dissemination(leader_gw, record);
                        }
                        self.relay(onward);
                    }
                }
            }
            Err(e) => {
                self.log.push(
                    now,
                    cluster,
                    "route_error",
                    format_args!("{}", e.to_string().replace(' ', "_")),
                );
            }
        }
        Ok(())
    }

    fn on_publish_match(&mut self, owner_gw: GatewayId, dev: DevEui, handler: GatewayId, join: FrameId) -> Result<()> {
        let now = self.now();
        // hearers in different clusters decide independently; first match wins
        if self.matched.get(&dev).is_some_and(|&j| j >= join) {
            self.log.push(
                now,
                owner_gw,
                "match_rejected",
                format_args!("dev={dev} join={} handler={handler}", join.0),
            );
            self.send(owner_gw, handler, Msg::MatchRejected { dev, join });
            return Ok(());
        }
        self.matched.insert(dev, join);
        let actor = self.gw(owner_gw).actor;
        let admin = self.admins.get_mut(&actor).ok_or(Error::NotOwner(owner_gw))?;
        let grant = match admin.craft_join_accept(owner_gw, dev, handler, now) {
            Ok(g) => g,
            Err(_) => {
                self.log
                    .push(now, owner_gw, "match_rejected", format_args!("dev={dev}"));
                return Ok(());
            }
        };
        let keys = grant.keys;
        self.gw_mut(owner_gw).keyring.install_app(dev, &keys);
        let renter = grant
            .renter_gateway
            .map_or_else(|| "none".to_string(), |g| g.to_string());
        self.log.push(
            now,
            owner_gw,
            "keys",
            format_args!(
                "dev={dev} session={} handler={handler} owner={owner_gw} renter={renter}",
                keys.session_id
            ),
        );
        if let Some(c) = grant.expired {
            self.log.push(
                now,
                owner_gw,
                "delegation_expired",
                format_args!("dev={dev} renter={}", c.renter_gateway),
            );
        }
        let deliver_to = grant.renter_gateway.unwrap_or(owner_gw);
        self.send(
            owner_gw,
            handler,
            Msg::KeyMaterial {
                dev,
                keys,
                role: KeyRole::Handler { join, deliver_to },
            },
        );
        if let Some(r) = grant.renter_gateway {
            self.send(
                owner_gw,
                r,
                Msg::KeyMaterial {
                    dev,
                    keys,
                    role: KeyRole::Renter,
                },
            );
        }
        if let Some(prev) = self.last_handler.insert(dev, handler) {
            if prev != handler {
                self.send(
                    owner_gw,
                    prev,
                    Msg::Release {
                        dev,
                        session: keys.session_id - 1,
                    },
                );
            }
        }
        Ok(())
    }

    fn on_key_material(&mut self, to: GatewayId, dev: DevEui, keys: SessionKeys, role: KeyRole) {
        let now = self.now();
        let p = self.setup.protocol;
        match role {
            KeyRole::Renter => {
                self.gw_mut(to).keyring.install_app(dev, &keys);
                self.log.push(
                    now,
                    to,
                    "renter_keys",
                    format_args!("dev={dev} session={}", keys.session_id),
                );
            }
            KeyRole::Handler { join, deliver_to } => {
                let g = self.gw_mut(to);
                let Some(pending) = g.pending_joins.get_mut(&dev) else {
                    return;
                };
                if pending.join != join {
                    return;
                }
                pending.session = Some(keys.session_id);
                let pending = *pending;
                g.keyring.install_nwk(dev, &keys);
                g.deliver_to.insert(dev, deliver_to);
                g.handled.register(
                    dev,
                    Registration {
                        channel: pending.channel,
                        sf: pending.sf,
                        session_id: keys.session_id,
                        since: now,
                    },
                );
                self.log.push(
                    now,
                    to,
                    "handler",
                    format_args!(
                        "dev={dev} join={} session={} ch={} sf={}",
                        join.0,
                        keys.session_id,
                        pending.channel.index(),
                        pending.sf.value()
                    ),
                );
                let rx1 = pending.join_end + p.rx1_delay;
                let rx2 = pending.join_end + p.rx2_delay;
                if now <= rx1 {
                    self.schedule(
                        rx1,
                        Event::RxWindow {
                            gw: to,
                            dev,
                            join,
                            window: 1,
                        },
                    );
                } else if now <= rx2 {
                    self.schedule(
                        rx2,
                        Event::RxWindow {
                            gw: to,
                            dev,
                            join,
                            window: 2,
                        },
                    );
                } else {
                    self.drop_accept(to, dev, join, keys.session_id);
                }
            }
        }
    }

    // --------------------------------------------------------------- pub/sub

    fn issue_subscribe(&mut self, owner: GatewayId, dev: DevEui, renter: Option<GatewayId>) {
        let now = self.now();
        let ttl = self.setup.pubsub.subscribe_ttl;
        let (record, outcome) = self.gw_mut(owner).pubsub.subscribe(dev, ttl, renter, now);
        self.log.push(
            now,
            owner,
            "subscribe",
            format_args!(
                "dev={dev} req={} renter={}",
                record.request_id,
                renter.map_or_else(|| "none".to_string(), |g| g.to_string())
            ),
        );
        match outcome {
            SubscribeOutcome::Disseminate => self.start_dissemination(owner, record),
            SubscribeOutcome::Matched(p) => {
                self.log.push(
                    now,
                    owner,
                    "subscribe_matched",
                    format_args!("dev={dev} heard_by={}", p.hearing_gateway),
                );
            }
        }
        if self.setup.graph.len() > 1 {
            let c = self.gw(owner).cluster;
            let leader = self.leaders[c.index()].leader_gateway;
            let lat = self.setup.protocol.intra_latency;
            self.schedule(
                now + lat,
                Event::ClusterMessageDelivery {
                    to: leader,
                    msg: Msg::SubscribeFlood(record),
                },
            );
        }
    }

    fn start_dissemination(&mut self, gw: GatewayId, record: SubscribeRecord) {
        let params = self.setup.pubsub;
        let peers = self.gw(gw).membership.peers();
        let mut d = Dissemination::new(record, gw, &peers, &mut self.rng);
        let step = d.start(&params);
        self.gw_mut(gw).disseminations.insert(record.request_id, d);
        self.dissemination_step(gw, record.request_id, step);
    }

    fn dissemination_step(&mut self, gw: GatewayId, request: RequestId, step: DisseminationStep) {
        match step {
            DisseminationStep::Send(to) => {
                let record = self.gw(gw).disseminations[&request].record;
                for r in to {
                    self.send(gw, r, Msg::SubscribeForward { from: gw, record });
                }
            }
            DisseminationStep::Wait => {}
            DisseminationStep::Done => {
                if let Some(d) = self.gw_mut(gw).disseminations.remove(&request) {
                    self.log.push(
                        self.now(),
                        gw,
                        "dissemination_done",
                        format_args!(
                            "req={request} rounds={} stored={} seen={}",
                            d.round, d.stored_answers, d.seen_answers
                        ),
                    );
                }
            }
        }
    }

    fn on_expiry_tick(&mut self, gw: GatewayId) {
        let now = self.now();
        let horizon = self.setup.pubsub.publish_horizon;
        let g = self.gw_mut(gw);
        let purged = g.pubsub.expiry_sweep(now, horizon);
        let evicted = g.membership.evict_stale(now);
        if purged > 0 {
            self.log.push(now, gw, "sweep", format_args!("purged={purged}"));
        }
        if !evicted.is_empty() {
            self.log
                .push(now, gw, "evict", format_args!("devices={}", evicted.len()));
            self.request_gossip(gw);
        }
        let period = self.setup.pubsub.sweep_period;
        self.schedule(now + period, Event::PubSubExpiryTick { gw });
    }

    fn on_delegate(&mut self, index: usize) -> Result<()> {
        let now = self.now();
        let spec = self.setup.delegations[index];
        let dev = spec.dev_eui;
        let d = &self.devices[dev.index()].spec;
        let (owner, owner_gw) = (d.owner, d.owner_gateway);
        let ttl = self.setup.pubsub.subscribe_ttl;
        let admin = self.admins.get_mut(&owner).ok_or(Error::NotOwner(owner_gw))?;
        match admin.delegate(dev, spec.renter, spec.renter_gateway, now, ttl) {
            Ok(_) => {
                self.log.push(
                    now,
                    owner_gw,
                    "delegate",
                    format_args!("dev={dev} renter={} renter_gw={}", spec.renter, spec.renter_gateway),
                );
                if self.federated() {
                    self.issue_subscribe(owner_gw, dev, Some(spec.renter_gateway));
                }
            }
            Err(e) => {
                self.log.push(
                    now,
                    owner_gw,
                    "delegate_rejected",
                    format_args!("dev={dev} reason={}", e.to_string().replace(' ', "_")),
                );
            }
        }
        Ok(())
    }

    // ------------------------------------------------------ gossip, leaders

    fn request_gossip(&mut self, gw: GatewayId) {
        let now = self.now();
        let g = self.gw_mut(gw);
        if !g.gossip_pending {
            g.gossip_pending = true;
            self.schedule(now, Event::GossipTick { gw, periodic: false });
        }
    }

    fn on_gossip_tick(&mut self, gw: GatewayId, periodic: bool) {
        let now = self.now();
        if periodic {
            let period = self.setup.membership.gossip_period;
            self.schedule(now + period, Event::GossipTick { gw, periodic: true });
        } else {
            self.gw_mut(gw).gossip_pending = false;
        }
        let g = &mut self.gateways[gw.index()];
        let occ = g.occupancy.occupation(now);
        let ex = g.membership.exchange(occ, now);
        let peers = g.membership.peers();
        g.membership.refresh_rps(&mut self.rng);
        self.log.push(
            now,
            gw,
            "gossip",
            format_args!("peers={} periodic={periodic}", peers.len()),
        );
        for p in peers {
            self.send(gw, p, Msg::GossipRequest(ex.clone()));
        }
    }

    fn on_leader_tick(&mut self) {
        let now = self.now();
        for c in 0..self.cluster_members.len() {
            let members: Vec<(GatewayId, f64)> = self.cluster_members[c]
                .iter()
                .map(|&g| {
                    let occ = self.gateways[g.index()].occupancy.occupation(now);
                    (g, occ.iter().sum::<f64>() / Channel::COUNT as f64)
                })
                .collect();
            let Some(leader) = elect_leader(&members) else {
                continue;
            };
            let state = &mut self.leaders[c];
            if state.handoff(leader) || now == 0.0 {
                let term = state.term;
                self.log.push(
                    now,
                    ClusterId(c as u32),
                    "leader",
                    format_args!("gw={leader} term={term}"),
                );
            }
        }
        let period = self.setup.protocol.leader_period;
        self.schedule(now + period, Event::LeaderTick);
    }

    fn on_housekeeping(&mut self) {
        let now = self.now();
        self.frames.retain(|_, m| m.end >= now - 60.0);
        let lapsed: Vec<_> = self.admins.values_mut().flat_map(|a| a.lapse(now)).collect();
        for c in lapsed {
            self.log.push(
                now,
                format!("actor{}", c.owner.0),
                "delegation_lapsed",
                format_args!("dev={} renter={}", c.dev_eui, c.renter_gateway),
            );
        }
        let period = self.setup.protocol.housekeeping_period;
        self.schedule(now + period, Event::Housekeeping);
    }

    // ---------------------------------------------------------------- checks

    fn check_invariants(&self) -> Result<()> {
        for d in &self.devices {
            if let DevState::Joined { handler, keys, .. } = &d.state {
                let reg = self.gw(*handler).handled.get(d.spec.dev_eui);
                if reg.map(|r| r.session_id) != Some(keys.session_id) {
                    return Err(Error::Config(format!(
                        "{} joined at {handler} but not registered there",
                        d.spec.dev_eui
                    )));
                }
            }
        }
        Ok(())
    }

    fn log_dev(&mut self, dev: DevEui, kind: &str, details: std::fmt::Arguments<'_>) {
        let now = self.now();
        self.log.push(now, dev, kind, details);
    }

    fn log_tx(&mut self, frame: &Frame) {
        self.log.push(
            frame.tx_start,
            frame.dev_eui,
            "tx",
            format_args!(
                "frame={} type={} ch={} sf={} airtime={:.6}",
                frame.id.0,
                frame.kind.label(),
                frame.channel.index(),
                frame.sf.value(),
                frame.airtime
            ),
        );
    }
}

fn validate_setup(setup: &SimSetup) -> Result<()> {
    if !(setup.duration >= 0.0 && setup.duration.is_finite()) {
        return Err(Error::Config(format!(
            "duration {} must be finite and >= 0",
            setup.duration
        )));
    }
    for (i, g) in setup.gateways.iter().enumerate() {
        if g.id.index() != i {
            return Err(Error::Config(format!(
                "gateway ids must be dense, found {} at {i}",
                g.id
            )));
        }
        if !setup.graph.contains(g.cluster) {
            return Err(Error::Config(format!("{} in unknown cluster {}", g.id, g.cluster)));
        }
    }
    let gateway_set: BTreeSet<GatewayId> = setup.gateways.iter().map(|g| g.id).collect();
    for (i, d) in setup.devices.iter().enumerate() {
        if d.dev_eui.index() != i {
            return Err(Error::Config(format!(
                "device ids must be dense, found {} at {i}",
                d.dev_eui
            )));
        }
        if !gateway_set.contains(&d.owner_gateway) {
            return Err(Error::Config(format!(
                "{} owned by unknown {}",
                d.dev_eui, d.owner_gateway
            )));
        }
        if setup.gateways[d.owner_gateway.index()].actor != d.owner {
            return Err(Error::Config(format!(
                "{}: owner gateway {} does not belong to {}",
                d.dev_eui, d.owner_gateway, d.owner
            )));
        }
        time_on_air(d.payload_size, SpreadingFactor::SF7, &setup.phy)?;
        if d.uplink_period <= 0.0 || d.rejoin_period <= 0.0 {
            return Err(Error::Config(format!("{}: periods must be positive", d.dev_eui)));
        }
        if !(0.0..=1.0).contains(&d.duty_limit) {
            return Err(Error::Config(format!("{}: duty limit outside [0, 1]", d.dev_eui)));
        }
        if d.first_wake < 0.0 {
            return Err(Error::Config(format!("{}: negative first wake", d.dev_eui)));
        }
    }
    for del in &setup.delegations {
        if del.dev_eui.index() >= setup.devices.len() || !gateway_set.contains(&del.renter_gateway) {
            return Err(Error::Config(format!(
                "delegation of {} references unknown entities",
                del.dev_eui
            )));
        }
        if setup.gateways[del.renter_gateway.index()].actor != del.renter {
            return Err(Error::Config(format!(
                "delegation of {}: {} does not belong to {}",
                del.dev_eui, del.renter_gateway, del.renter
            )));
        }
    }
    if !setup.sensitivity.is_monotone() {
        return Err(Error::Config("sensitivity table must decrease with SF".into()));
    }
    let w = setup.weights;
    if w.rssi < 0.0 || w.occupation < 0.0 || w.load < 0.0 || ((w.rssi + w.occupation + w.load) - 1.0).abs() > 1e-9 {
        return Err(Error::Config("score weights must be non-negative and sum to 1".into()));
    }
    if setup.protocol.consensus_rounds == 0 || setup.protocol.round_time <= 0.0 {
        return Err(Error::Config(
            "consensus needs at least one round of positive length".into(),
        ));
    }
    Ok(())
}

/// Runs one simulation.
pub fn run(setup: SimSetup, record_log: bool) -> Result<RunOutput> {
    Simulator::new(setup, record_log)?.run()
}
