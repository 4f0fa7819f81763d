//! LoRa physical layer model.
//!
//! Airtime follows the Semtech modem equations: a symbol lasts `2^SF / BW`,
//! the preamble costs `n_preamble + 4.25` symbols and the payload costs
//! `8 + max(ceil((8PL - 4SF + 28 + 16CRC - 20IH) / (4(SF - 2DE))) * (CR + 4), 0)`
//! symbols. RSSI comes from a log-distance path-loss law. Each gateway listens
//! on eight channels and a channel holds at most one reception: an overlapping
//! arrival destroys both frames, and the one with the longer remaining airtime
//! keeps the channel busy until it ends.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{DevEui, Position};

/// Largest application payload accepted on air.
pub const MAX_PAYLOAD: usize = 230;

/// Slack used when comparing accumulated airtime against a budget.
pub const BUDGET_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SpreadingFactor(u8);

impl SpreadingFactor {
    pub const SF7: Self = Self(7);
    pub const SF8: Self = Self(8);
    pub const SF9: Self = Self(9);
    pub const SF10: Self = Self(10);
    pub const SF11: Self = Self(11);
    pub const SF12: Self = Self(12);
    pub const ALL: [Self; 6] = [Self::SF7, Self::SF8, Self::SF9, Self::SF10, Self::SF11, Self::SF12];

    pub fn new(value: u8) -> Result<Self> {
        if (7..=12).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::SpreadingFactor(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Position in [`SpreadingFactor::ALL`].
    pub fn rank(self) -> usize {
        (self.0 - 7) as usize
    }

    /// The next slower spreading factor, saturating at SF12.
    pub fn step_up(self) -> Self {
        Self((self.0 + 1).min(12))
    }
}

impl TryFrom<u8> for SpreadingFactor {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Self::new(value)
    }
}

impl From<SpreadingFactor> for u8 {
    fn from(sf: SpreadingFactor) -> u8 {
        sf.0
    }
}

impl fmt::Display for SpreadingFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SF{}", self.0)
    }
}

/// One of the eight uplink channels of an EU868-like gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Channel(u8);

impl Channel {
    pub const COUNT: usize = 8;

    pub fn new(index: u8) -> Result<Self> {
        if (index as usize) < Self::COUNT {
            Ok(Self(index))
        } else {
            Err(Error::Channel(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Channel> {
        (0..Self::COUNT as u8).map(Channel)
    }
}

impl TryFrom<u8> for Channel {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Channel> for u8 {
    fn from(ch: Channel) -> u8 {
        ch.0
    }
}

/// Modem configuration feeding the airtime formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhyParams {
    pub bandwidth_hz: f64,
    /// Coding rate denominator: 5 for 4/5 up to 8 for 4/8.
    pub coding_rate: u8,
    pub preamble_symbols: f64,
    pub explicit_header: bool,
    pub crc: bool,
    /// Low data rate optimisation is switched on from this SF upwards.
    pub low_data_rate_from: u8,
    /// Bytes added to every application payload before modulation
    /// (MAC header, FHDR, port, MIC and similar framing).
    pub frame_overhead_bytes: usize,
}

impl Default for PhyParams {
    fn default() -> Self {
        Self {
            bandwidth_hz: 125_000.0,
            coding_rate: 5,
            preamble_symbols: 8.0,
            explicit_header: true,
            crc: true,
            low_data_rate_from: 11,
            frame_overhead_bytes: 0,
        }
    }
}

impl PhyParams {
    /// Modem defaults plus 33 bytes of framing overhead. A 1-byte payload then
    /// takes 77.056 ms at SF7 and 1810.43 ms at SF12.
    pub fn calibrated() -> Self {
        Self {
            frame_overhead_bytes: 33,
            ..Self::default()
        }
    }

    pub fn symbol_time(&self, sf: SpreadingFactor) -> f64 {
        f64::from(1u32 << sf.value()) / self.bandwidth_hz
    }

    pub fn low_data_rate(&self, sf: SpreadingFactor) -> bool {
        sf.value() >= self.low_data_rate_from
    }
}

/// Seconds on air for `payload_size` application bytes.
pub fn time_on_air(payload_size: usize, sf: SpreadingFactor, phy: &PhyParams) -> Result<f64> {
    if !(1..=MAX_PAYLOAD).contains(&payload_size) {
        return Err(Error::PayloadSize(payload_size));
    }
    let sf_v = f64::from(sf.value());
    let phy_len = (payload_size + phy.frame_overhead_bytes) as f64;
    let crc = if phy.crc { 16.0 } else { 0.0 };
    let implicit = if phy.explicit_header { 0.0 } else { 20.0 };
    let de = if phy.low_data_rate(sf) { 1.0 } else { 0.0 };

    let numerator = 8.0 * phy_len - 4.0 * sf_v + 28.0 + crc - implicit;
    let denominator = 4.0 * (sf_v - 2.0 * de);
    let blocks = (numerator / denominator).ceil().max(0.0);
    let payload_symbols = 8.0 + blocks * f64::from(phy.coding_rate);

    let t_sym = phy.symbol_time(sf);
    Ok((phy.preamble_symbols + 4.25 + payload_symbols) * t_sym)
}

/// Frames a transmitter may send per hour under `duty`, at `airtime` each.
pub fn frames_per_hour(airtime: f64, duty: &DutyCycleBudget) -> u32 {
    if duty.limit <= 0.0 || airtime <= 0.0 {
        return 0;
    }
    (3600.0 * duty.limit / airtime + BUDGET_EPSILON).floor() as u32
}

/// Log-distance path loss: `PL(d) = PL0 + 10 n log10(d / d0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathModel {
    pub pl0_db: f64,
    pub exponent: f64,
    pub d0_m: f64,
}

impl Default for PathModel {
    fn default() -> Self {
        Self {
            pl0_db: 40.0,
            exponent: 2.7,
            d0_m: 1.0,
        }
    }
}

/// Received power at `rx`. Distances below the reference distance are
/// clamped to it.
pub fn rssi_at(tx: Position, rx: Position, tx_power_dbm: f64, path: &PathModel) -> f64 {
    let d = tx.distance(&rx).max(path.d0_m);
    tx_power_dbm - (path.pl0_db + 10.0 * path.exponent * (d / path.d0_m).log10())
}

/// Demodulation floor per spreading factor, SF7 first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub dbm: [f64; 6],
}

impl Default for SensitivityTable {
    /// SX1276-class datasheet values at 125 kHz.
    fn default() -> Self {
        Self {
            dbm: [-123.0, -126.0, -129.0, -132.0, -134.5, -137.0],
        }
    }
}

impl SensitivityTable {
    pub fn threshold(&self, sf: SpreadingFactor) -> f64 {
        self.dbm[sf.rank()]
    }

    /// Most sensitive entry.
    pub fn floor(&self) -> f64 {
        self.dbm.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Lowest spreading factor that demodulates `rssi` with `margin_db` to
    /// spare, if any.
    pub fn lowest_sf(&self, rssi: f64, margin_db: f64) -> Option<SpreadingFactor> {
        SpreadingFactor::ALL
            .into_iter()
            .find(|&sf| rssi - margin_db >= self.threshold(sf))
    }

    pub fn is_monotone(&self) -> bool {
        self.dbm.windows(2).all(|w| w[1] < w[0])
    }
}

pub fn in_range(rssi: f64, sf: SpreadingFactor, sensitivity: &SensitivityTable) -> bool {
    rssi >= sensitivity.threshold(sf)
}

/// Rolling-window airtime ledger for one transmitter on one sub-band.
#[derive(Debug, Clone, PartialEq)]
pub struct DutyCycleBudget {
    pub limit: f64,
    pub window_length: f64,
    ledger: VecDeque<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DutyDecision {
    Allowed,
    /// Earliest lawful start time. Infinite when the frame can never fit.
    Deferred(f64),
}

impl DutyCycleBudget {
    pub const HOUR: f64 = 3600.0;

    pub fn new(limit: f64) -> Self {
        Self::with_window(limit, Self::HOUR)
    }

    pub fn with_window(limit: f64, window_length: f64) -> Self {
        Self {
            limit,
            window_length,
            ledger: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> f64 {
        self.limit * self.window_length
    }

    /// Same expression as the deferral time below, so a device woken at
    /// `start + window` always finds that entry expired.
    fn expired(&self, start: f64, now: f64) -> bool {
        start + self.window_length <= now
    }

    fn prune(&mut self, now: f64) {
        while self.ledger.front().is_some_and(|&(start, _)| self.expired(start, now)) {
            self.ledger.pop_front();
        }
    }

    /// Airtime of transmissions started in `(now - window, now]`.
    pub fn window_used(&self, now: f64) -> f64 {
        self.ledger
            .iter()
            .filter(|&&(start, _)| !self.expired(start, now) && start <= now)
            .map(|&(_, a)| a)
            .sum()
    }

    /// Decide without recording.
    pub fn check(&mut self, airtime: f64, now: f64) -> DutyDecision {
        self.prune(now);
        let cap = self.capacity();
        if airtime > cap + BUDGET_EPSILON {
            return DutyDecision::Deferred(f64::INFINITY);
        }
        let used: f64 = self.ledger.iter().map(|&(_, a)| a).sum();
        if used + airtime <= cap + BUDGET_EPSILON {
            return DutyDecision::Allowed;
        }
        let mut remaining = used;
        for &(start, a) in &self.ledger {
            remaining -= a;
            if remaining + airtime <= cap + BUDGET_EPSILON {
                return DutyDecision::Deferred((start + self.window_length).max(now));
            }
        }
        DutyDecision::Deferred(f64::INFINITY)
    }

    /// Decide and, when allowed, charge `airtime` at `now`.
    pub fn consume(&mut self, airtime: f64, now: f64) -> DutyDecision {
        let decision = self.check(airtime, now);
        if decision == DutyDecision::Allowed {
            self.ledger.push_back((now, airtime));
        }
        decision
    }
}

/// Functional alias for [`DutyCycleBudget::consume`].
pub fn consume_duty(budget: &mut DutyCycleBudget, airtime: f64, now: f64) -> DutyDecision {
    budget.consume(airtime, now)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    JoinRequest,
    DataUplink,
    JoinAccept,
    Downlink,
}

impl FrameKind {
    pub fn label(self) -> &'static str {
        match self {
            FrameKind::JoinRequest => "join",
            FrameKind::DataUplink => "data",
            FrameKind::JoinAccept => "accept",
            FrameKind::Downlink => "down",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: FrameId,
    pub kind: FrameKind,
    pub dev_eui: DevEui,
    pub channel: Channel,
    pub sf: SpreadingFactor,
    pub payload_size: usize,
    pub tx_start: f64,
    pub airtime: f64,
    pub origin: Position,
    pub tx_power_dbm: f64,
}

impl Frame {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: FrameId,
        kind: FrameKind,
        dev_eui: DevEui,
        channel: Channel,
        sf: SpreadingFactor,
        payload_size: usize,
        tx_start: f64,
        origin: Position,
        tx_power_dbm: f64,
        phy: &PhyParams,
    ) -> Result<Self> {
        let airtime = time_on_air(payload_size, sf, phy)?;
        Ok(Self {
            id,
            kind,
            dev_eui,
            channel,
            sf,
            payload_size,
            tx_start,
            airtime,
            origin,
            tx_power_dbm,
        })
    }

    pub fn end(&self) -> f64 {
        self.tx_start + self.airtime
    }
}

#[derive(Debug, Clone, PartialEq)]
struct InFlight {
    frame: Frame,
    end: f64,
    doomed: bool,
}

/// A reception that finished, cleanly or not.
#[derive(Debug, Clone, PartialEq)]
pub struct Settled {
    pub frame: Frame,
    pub delivered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReceptionStatus {
    /// The channel was idle; the frame is now in flight.
    Started,
    /// The channel was busy. `lost` lists frames destroyed by this arrival
    /// (the arriving frame and, unless already doomed, the in-flight one);
    /// `blocking` is the frame that keeps the channel busy.
    Collided { lost: Vec<FrameId>, blocking: FrameId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceptionOutcome {
    /// A previous reception whose airtime had elapsed by `now`.
    pub settled: Option<Settled>,
    pub status: ReceptionStatus,
}

/// Receiver state of one channel at one gateway.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelReceiverState {
    slot: Option<InFlight>,
}

impl ChannelReceiverState {
    pub fn is_busy(&self, now: f64) -> bool {
        self.slot.as_ref().is_some_and(|s| s.end > now)
    }

    pub fn remaining_airtime(&self, now: f64) -> Option<f64> {
        self.slot.as_ref().filter(|s| s.end > now).map(|s| s.end - now)
    }

    pub fn in_flight(&self) -> Option<(&Frame, bool)> {
        self.slot.as_ref().map(|s| (&s.frame, s.doomed))
    }

    /// Releases the in-flight reception once its airtime has elapsed.
    pub fn complete(&mut self, now: f64) -> Option<Settled> {
        if self.slot.as_ref().is_some_and(|s| s.end <= now) {
            self.slot.take().map(|s| Settled {
                frame: s.frame,
                delivered: !s.doomed,
            })
        } else {
            None
        }
    }

    pub fn begin_reception(&mut self, frame: Frame, now: f64) -> ReceptionOutcome {
        let settled = self.complete(now);
        let status = match self.slot.as_mut() {
            None => {
                self.slot = Some(InFlight {
                    end: now + frame.airtime,
                    frame,
                    doomed: false,
                });
                ReceptionStatus::Started
            }
            Some(current) => {
                let mut lost = vec![frame.id];
                if !current.doomed {
                    lost.push(current.frame.id);
                }
                let incoming_end = now + frame.airtime;
                if incoming_end > current.end {
                    *current = InFlight {
                        frame,
                        end: incoming_end,
                        doomed: true,
                    };
                } else {
                    current.doomed = true;
                }
                ReceptionStatus::Collided {
                    lost,
                    blocking: current.frame.id,
                }
            }
        };
        ReceptionOutcome { settled, status }
    }
}

/// The eight channel receivers of one gateway.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GatewayReceiver {
    channels: [ChannelReceiverState; Channel::COUNT],
}

impl GatewayReceiver {
    pub fn begin_reception(&mut self, frame: Frame, now: f64) -> ReceptionOutcome {
        self.channels[frame.channel.index()].begin_reception(frame, now)
    }

    pub fn complete(&mut self, channel: Channel, now: f64) -> Option<Settled> {
        self.channels[channel.index()].complete(now)
    }

    pub fn channel(&self, channel: Channel) -> &ChannelReceiverState {
        &self.channels[channel.index()]
    }
}

/// Runs `frames` through a single gateway receiver and returns the ids that
/// were delivered.
pub fn deliver_schedule(frames: &[Frame]) -> BTreeSet<FrameId> {
    let mut order: Vec<&Frame> = frames.iter().collect();
    order.sort_by(|a, b| a.tx_start.total_cmp(&b.tx_start).then(a.id.cmp(&b.id)));
    let mut rx = GatewayReceiver::default();
    let mut delivered = BTreeSet::new();
    let mut keep = |s: Option<Settled>| {
        if let Some(s) = s.filter(|s| s.delivered) {
            delivered.insert(s.frame.id);
        }
    };
    for f in order {
        let outcome = rx.begin_reception(f.clone(), f.tx_start);
        keep(outcome.settled);
    }
    for ch in Channel::all() {
        keep(rx.complete(ch, f64::INFINITY));
    }
    delivered
}
