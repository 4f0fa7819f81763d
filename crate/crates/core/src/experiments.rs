//! Scenario files, the three evaluation layouts, seeded sweeps and result
//! files.
//!
//! A scenario is a TOML document. Every key is optional except `mode`:
//!
//! ```toml
//! name = "baseline_100"
//! mode = "baseline"          # baseline | two_actor | flip
//! device_count = 100
//! grid = 9000.0              # side of the square field, metres
//! duration = 1800.0          # sim seconds
//! altruist = false           # channel placement of federated handlers
//! seeds = [1, 2, 3]
//! device_actors = 4          # actors owning devices; defaults to gateway owners
//!
//! [devices]                  # ranges are inclusive-exclusive uniform draws
//! payload_min = 1
//! payload_max = 51
//! period_min = 1.0
//! period_max = 10.0
//!
//! [[gateways]]               # omit for the canonical 4-gateway layout
//! x = -2250.0
//! y = -2250.0
//! actor = 0
//! cluster = 0
//!
//! [clusters]                 # one cluster unless edges or generate are given
//! count = 2
//! edges = [[0, 1]]
//!
//! [[delegations]]
//! device = 3
//! renter = 1
//! renter_gateway = 1
//! at = 0.0
//! ```
//!
//! Further sections `phy`, `path`, `sensitivity`, `membership`, `pubsub`,
//! `weights` and `protocol` override the corresponding parameter blocks.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admin::{fair_use_check, ActorInventory};
use crate::consensus::{PlacementMode, ScoreWeights};
use crate::engine::{
    audit, run, AuditReport, DelegationSpec, DeviceSpec, GatewaySpec, HandlingPolicy, ProtocolParams, RunMetrics,
    RunOutput, SimSetup,
};
use crate::error::{Error, Result};
use crate::ids::{ActorId, ClusterId, DevEui, GatewayId, Position};
use crate::intercluster::{generate_cluster_graph, ClusterGraph, GraphParams};
use crate::membership::MembershipParams;
use crate::pubsub::PubSubParams;
use crate::radio::{PathModel, PhyParams, SensitivityTable, MAX_PAYLOAD};

const STREAM_PLACEMENT: u64 = 1;
const STREAM_DEVICES: u64 = 2;

pub const DESK_COUNTS: [usize; 6] = [100, 200, 300, 400, 500, 600];
pub const DESK_DURATION: f64 = 1800.0;
pub const PAPER_COUNTS: [usize; 10] = [100, 200, 300, 400, 500, 600, 700, 800, 900, 1000];
pub const PAPER_DURATION: f64 = 5.0 * 3600.0;
pub const DEFAULT_REPEATS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One actor owns every gateway and device.
    Baseline,
    /// Two actors with two gateways each, no cooperation.
    TwoActor,
    /// One actor per gateway, devices handled by whoever the consensus picks.
    Flip,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::TwoActor, Mode::Flip];

    pub fn label(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::TwoActor => "two_actor",
            Mode::Flip => "flip",
        }
    }

    pub fn policy(self) -> HandlingPolicy {
        match self {
            Mode::Baseline | Mode::TwoActor => HandlingPolicy::Centralized,
            Mode::Flip => HandlingPolicy::Federated,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Mode::Baseline),
            "two_actor" | "two-actor" | "twoactor" => Ok(Mode::TwoActor),
            "flip" => Ok(Mode::Flip),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Ranges of the per-device random parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceParams {
    pub payload_min: usize,
    pub payload_max: usize,
    pub period_min: f64,
    pub period_max: f64,
    pub rejoin_min: f64,
    pub rejoin_max: f64,
    pub duty_limit: f64,
    /// First join requests are spread uniformly over `[0, first_wake_max)`.
    pub first_wake_max: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            payload_min: 1,
            payload_max: 51,
            period_min: 1.0,
            period_max: 10.0,
            rejoin_min: 1800.0,
            rejoin_max: 3600.0,
            duty_limit: 0.01,
            first_wake_max: 120.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayEntry {
    pub x: f64,
    pub y: f64,
    pub actor: u32,
    #[serde(default)]
    pub cluster: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub count: usize,
    pub edges: Vec<(u32, u32)>,
    /// Random nested graph instead of explicit edges.
    pub generate: Option<GraphParams>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            count: 1,
            edges: Vec::new(),
            generate: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelegationEntry {
    pub device: u32,
    pub renter: u32,
    pub renter_gateway: u32,
    #[serde(default)]
    pub at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub mode: Mode,
    #[serde(default)]
    pub device_count: usize,
    #[serde(default = "default_grid")]
    pub grid: f64,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default)]
    pub altruist: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Number of actors devices are split across, round robin. Defaults to
    /// the number of actors owning gateways.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_actors: Option<usize>,
    #[serde(default)]
    pub devices: DeviceParams,
    #[serde(default)]
    pub gateways: Vec<GatewayEntry>,
    #[serde(default)]
    pub clusters: ClusterSection,
    #[serde(default)]
    pub delegations: Vec<DelegationEntry>,
    #[serde(default = "PhyParams::calibrated")]
    pub phy: PhyParams,
    #[serde(default)]
    pub path: PathModel,
    #[serde(default)]
    pub sensitivity: SensitivityTable,
    #[serde(default)]
    pub membership: MembershipParams,
    #[serde(default)]
    pub pubsub: PubSubParams,
    #[serde(default)]
    pub weights: ScoreWeights,
    #[serde(default)]
    pub protocol: ProtocolParams,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_grid() -> f64 {
    9_000.0
}

fn default_duration() -> f64 {
    DESK_DURATION
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl ScenarioConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn placement(&self) -> PlacementMode {
        if self.altruist {
            PlacementMode::Altruist
        } else {
            PlacementMode::Selfish
        }
    }

    /// Gateways as placed, canonical layout when none are listed.
    pub fn gateway_entries(&self) -> Vec<GatewayEntry> {
        if !self.gateways.is_empty() {
            return self.gateways.clone();
        }
        let q = self.grid / 4.0;
        let corners = [(-q, -q), (-q, q), (q, -q), (q, q)];
        corners
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| GatewayEntry {
                x,
                y,
                actor: match self.mode {
                    Mode::Baseline => 0,
                    Mode::TwoActor => (i / 2) as u32,
                    Mode::Flip => i as u32,
                },
                cluster: 0,
            })
            .collect()
    }

    fn actor_count(&self, gateways: &[GatewayEntry]) -> usize {
        gateways.iter().map(|g| g.actor as usize + 1).max().unwrap_or(0)
    }

    /// Actor owning device `i`, given the number of gateway-owning actors.
    pub fn device_owner(&self, i: usize, actors: usize) -> ActorId {
        let n = self.device_actors.unwrap_or(match self.mode {
            Mode::Baseline => 1,
            _ => actors,
        });
        ActorId((i % n.max(1)) as u32)
    }

    /// Structural checks, run before anything executes.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.grid > 0.0 && self.grid.is_finite()) {
            return cfg(format!("grid must be positive, got {}", self.grid));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return cfg(format!("duration must be finite and >= 0, got {}", self.duration));
        }
        if self.seeds.is_empty() {
            return cfg("at least one seed is required".into());
        }
        let d = &self.devices;
        if d.payload_min == 0 || d.payload_min > d.payload_max {
            return cfg(format!("payload range [{}, {}] is empty", d.payload_min, d.payload_max));
        }
        if d.payload_max > MAX_PAYLOAD {
            return Err(Error::PayloadSize(d.payload_max));
        }
        if !(d.period_min > 0.0 && d.period_min <= d.period_max) {
            return cfg(format!(
                "uplink period range [{}, {}] is invalid",
                d.period_min, d.period_max
            ));
        }
        if !(d.rejoin_min > 0.0 && d.rejoin_min <= d.rejoin_max) {
            return cfg(format!("rejoin range [{}, {}] is invalid", d.rejoin_min, d.rejoin_max));
        }
        if !(d.duty_limit > 0.0 && d.duty_limit <= 1.0) {
            return cfg(format!("duty limit {} outside (0, 1]", d.duty_limit));
        }
        if d.first_wake_max < 0.0 {
            return cfg("first_wake_max must be >= 0".into());
        }
        let gateways = self.gateway_entries();
        let actors = self.actor_count(&gateways);
        for a in 0..actors as u32 {
            if !gateways.iter().any(|g| g.actor == a) {
                return cfg(format!("actor ids must be dense; actor{a} has no gateway"));
            }
        }
        match self.mode {
            Mode::Baseline if actors != 1 => return cfg(format!("baseline needs exactly one actor, found {actors}")),
            Mode::TwoActor if actors != 2 => return cfg(format!("two_actor needs exactly two actors, found {actors}")),
            Mode::Flip if actors < 2 => return cfg(format!("flip needs at least two actors, found {actors}")),
            _ => {}
        }
        if self.gateways.is_empty() {
            let expected = match self.mode {
                Mode::Baseline => 1,
                Mode::TwoActor => 2,
                Mode::Flip => 4,
            };
            debug_assert_eq!(actors, expected);
        }
        let clusters = self.cluster_count();
        for (i, g) in gateways.iter().enumerate() {
            if g.cluster as usize >= clusters {
                return cfg(format!(
                    "gateway {i} in cluster {} but only {clusters} exist",
                    g.cluster
                ));
            }
        }
        for (a, b) in &self.clusters.edges {
            if *a as usize >= clusters || *b as usize >= clusters || a == b {
                return cfg(format!("bad cluster edge ({a}, {b})"));
            }
        }
        for del in &self.delegations {
            if del.device as usize >= self.device_count {
                return cfg(format!(
                    "delegation names device {} of {}",
                    del.device, self.device_count
                ));
            }
            let Some(g) = gateways.get(del.renter_gateway as usize) else {
                return cfg(format!("delegation names unknown gateway {}", del.renter_gateway));
            };
            if g.actor != del.renter {
                return cfg(format!(
                    "gateway {} does not belong to actor{}",
                    del.renter_gateway, del.renter
                ));
            }
            if self.device_owner(del.device as usize, actors).0 == del.renter {
                return cfg(format!("device {} cannot be delegated to its owner", del.device));
            }
        }
        let owners = actors.max(self.device_actors.unwrap_or(0)).max(1);
        let inventory: Vec<ActorInventory> = (0..owners)
            .map(|a| ActorInventory {
                actor: ActorId(a as u32),
                gateways: gateways.iter().filter(|g| g.actor as usize == a).count(),
                devices: (0..self.device_count)
                    .filter(|&i| self.device_owner(i, actors).index() == a)
                    .count(),
            })
            .collect();
        let violations = fair_use_check(&inventory);
        if !violations.is_empty() {
            return Err(Error::FairUse(violations.join("; ")));
        }
        Ok(())
    }

    fn cluster_count(&self) -> usize {
        match self.clusters.generate {
            Some(p) => p.n1 * p.n2,
            None => self.clusters.count.max(1),
        }
    }

    /// Resolves every random draw for one seed.
    pub fn resolve(&self, seed: u64) -> Result<SimSetup> {
        self.validate()?;
        let gateways = self.gateway_entries();
        let actors = self.actor_count(&gateways);

        let mut placement = ChaCha8Rng::seed_from_u64(seed);
        placement.set_stream(STREAM_PLACEMENT);
        let graph = match self.clusters.generate {
            Some(p) => generate_cluster_graph(p, &mut placement)?,
            None => ClusterGraph::from_edges(self.cluster_count(), &self.clusters.edges)?,
        };
        if !graph.is_connected() {
            return Err(Error::Disconnected(graph.len()));
        }

        let gateway_specs: Vec<GatewaySpec> = gateways
            .iter()
            .enumerate()
            .map(|(i, g)| GatewaySpec {
                id: GatewayId(i as u32),
                position: Position::new(g.x, g.y),
                actor: ActorId(g.actor),
                cluster: ClusterId(g.cluster),
            })
            .collect();
        let first_gateway = |a: ActorId| {
            gateway_specs
                .iter()
                .find(|g| g.actor == a)
                .map(|g| g.id)
                .expect("validated: every actor has a gateway")
        };

        let devices = draw_devices(self, seed)
            .into_iter()
            .enumerate()
            .map(|(i, draw)| {
                let owner = self.device_owner(i, actors);
                DeviceSpec {
                    dev_eui: DevEui(i as u32),
                    owner,
                    owner_gateway: first_gateway(owner),
                    position: draw.position,
                    payload_size: draw.payload_size,
                    uplink_period: draw.uplink_period,
                    rejoin_period: draw.rejoin_period,
                    duty_limit: self.devices.duty_limit,
                    first_wake: draw.first_wake,
                }
            })
            .collect();

        let delegations = self
            .delegations
            .iter()
            .map(|d| DelegationSpec {
                dev_eui: DevEui(d.device),
                renter: ActorId(d.renter),
                renter_gateway: GatewayId(d.renter_gateway),
                at: d.at,
            })
            .collect();

        Ok(SimSetup {
            seed,
            duration: self.duration,
            policy: self.mode.policy(),
            placement: self.placement(),
            gateways: gateway_specs,
            devices,
            graph,
            delegations,
            phy: self.phy,
            path: self.path,
            sensitivity: self.sensitivity,
            membership: self.membership,
            pubsub: self.pubsub,
            weights: self.weights,
            protocol: self.protocol,
        })
    }
}

/// Mode-independent random draws of one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviceDraw {
    pub position: Position,
    pub payload_size: usize,
    pub uplink_period: f64,
    pub rejoin_period: f64,
    pub first_wake: f64,
}

/// Device draws come from their own stream, so every mode sees the same
/// field for a given seed.
pub fn draw_devices(cfg: &ScenarioConfig, seed: u64) -> Vec<DeviceDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_DEVICES);
    let half = cfg.grid / 2.0;
    let d = cfg.devices;
    (0..cfg.device_count)
        .map(|_| {
            let x = rng.gen_range(-half..half);
            let y = rng.gen_range(-half..half);
            DeviceDraw {
                position: Position::new(x, y),
                payload_size: rng.gen_range(d.payload_min..=d.payload_max),
                uplink_period: uniform(&mut rng, d.period_min, d.period_max),
                rejoin_period: uniform(&mut rng, d.rejoin_min, d.rejoin_max),
                first_wake: uniform(&mut rng, 0.0, d.first_wake_max),
            }
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// One of the three evaluation layouts at desk scale.
pub fn build_scenario(mode: Mode, device_count: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: format!("{}_{device_count}", mode.label()),
        mode,
        device_count,
        grid: default_grid(),
        duration: DESK_DURATION,
        altruist: false,
        seeds: vec![seed],
        device_actors: None,
        devices: DeviceParams::default(),
        gateways: Vec::new(),
        clusters: ClusterSection::default(),
        delegations: Vec::new(),
        phy: PhyParams::calibrated(),
        path: PathModel::default(),
        sensitivity: SensitivityTable::default(),
        membership: MembershipParams::default(),
        pubsub: PubSubParams::default(),
        weights: ScoreWeights::default(),
        protocol: ProtocolParams::default(),
    }
}

/// Runs one scenario for one seed, optionally keeping the event log.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64, record_log: bool) -> Result<RunOutput> {
    run(cfg.resolve(seed)?, record_log)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub modes: Vec<Mode>,
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Placement variants; one series per entry.
    pub altruist: Vec<bool>,
    pub duration: f64,
    /// Template every run starts from; mode, count, seed and placement are
    /// overwritten per run.
    pub template: ScenarioConfig,
    /// Keep each run's log long enough to audit it.
    pub audit: bool,
}

impl SweepSpec {
    pub fn desk(modes: Vec<Mode>, repeats: usize) -> Self {
        Self {
            modes,
            counts: DESK_COUNTS.to_vec(),
            seeds: (1..=repeats as u64).collect(),
            altruist: vec![false],
            duration: DESK_DURATION,
            template: build_scenario(Mode::Baseline, 0, 1),
            audit: false,
        }
    }

    pub fn paper_scale(mut self) -> Self {
        self.counts = PAPER_COUNTS.to_vec();
        self.duration = PAPER_DURATION;
        self
    }

    pub fn series_label(&self, mode: Mode, altruist: bool) -> String {
        if self.altruist.len() > 1 {
            let tag = if altruist { "altruist" } else { "selfish" };
            format!("{}_{tag}", mode.label())
        } else {
            mode.label().to_string()
        }
    }

    pub fn config_for(&self, mode: Mode, count: usize, seed: u64, altruist: bool) -> ScenarioConfig {
        let mut cfg = self.template.clone();
        cfg.mode = mode;
        cfg.device_count = count;
        cfg.seeds = vec![seed];
        cfg.altruist = altruist;
        cfg.duration = self.duration;
        cfg.name = format!("{}_{count}", mode.label());
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub series: String,
    pub mode: Mode,
    pub altruist: bool,
    pub device_count: usize,
    pub seed: u64,
    pub metrics: RunMetrics,
    #[serde(skip)]
    pub audit: Option<AuditReport>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Metrics written as one file each.
pub const METRICS: [&str; 4] = ["join_ratio", "collisions", "delivered", "frames_sent"];

pub fn metric_value(m: &RunMetrics, name: &str) -> f64 {
    match name {
        "join_ratio" => m.join_ratio,
        "collisions" => m.collisions as f64,
        "delivered" => m.frames_delivered_to_owner as f64,
        "frames_sent" => m.frames_sent as f64,
        other => panic!("unknown metric {other}"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub series: String,
    pub device_count: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub runs: Vec<RunRecord>,
    pub rows: Vec<AggregateRow>,
}

impl SweepTable {
    pub fn from_runs(runs: Vec<RunRecord>) -> Self {
        let mut groups: BTreeMap<(String, usize), Vec<&RunRecord>> = BTreeMap::new();
        for r in &runs {
            groups.entry((r.series.clone(), r.device_count)).or_default().push(r);
        }
        let mut rows = Vec::new();
        for metric in METRICS {
            for ((series, count), group) in &groups {
                let values: Vec<f64> = group.iter().map(|r| metric_value(&r.metrics, metric)).collect();
                let (mean, std) = mean_std(&values);
                rows.push(AggregateRow {
                    series: series.clone(),
                    device_count: *count,
                    metric: metric.to_string(),
                    mean,
                    std,
                    values,
                });
            }
        }
        Self { runs, rows }
    }

    pub fn row(&self, series: &str, count: usize, metric: &str) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.series == series && r.device_count == count && r.metric == metric)
    }

    pub fn series(&self) -> Vec<String> {
        let mut s: Vec<String> = self.rows.iter().map(|r| r.series.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Runs every (series, count, seed) combination in parallel.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepTable> {
    let mut jobs = Vec::new();
    for &mode in &spec.modes {
        for &altruist in &spec.altruist {
            for &count in &spec.counts {
                for &seed in &spec.seeds {
                    jobs.push((mode, altruist, count, seed));
                }
            }
        }
    }
    let results: Vec<Result<RunRecord>> = jobs
        .par_iter()
        .map(|&(mode, altruist, count, seed)| {
            let cfg = spec.config_for(mode, count, seed, altruist);
            let out = run_scenario(&cfg, seed, spec.audit)?;
            let report = spec.audit.then(|| {
                audit(
                    &out.log,
                    &out.metrics,
                    cfg.devices.duty_limit,
                    cfg.protocol.gateway_duty,
                )
            });
            Ok(RunRecord {
                series: spec.series_label(mode, altruist),
                mode,
                altruist,
                device_count: count,
                seed,
                metrics: out.metrics,
                audit: report,
            })
        })
        .collect();
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SweepTable::from_runs(runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Writes one file per metric (`<metric>.csv` or `<metric>.json`) and returns
/// the paths written.
pub fn emit_results(table: &SweepTable, format: Format, dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::EmptyTable);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for metric in METRICS {
        let rows: Vec<&AggregateRow> = table.rows.iter().filter(|r| r.metric == metric).collect();
        let (path, body) = match format {
            Format::Csv => {
                let mut s = String::from("device_count,mode,metric_mean,metric_std\n");
                for r in &rows {
                    s.push_str(&format!("{},{},{},{}\n", r.device_count, r.series, r.mean, r.std));
                }
                (dir.join(format!("{metric}.csv")), s)
            }
            Format::Json => (
                dir.join(format!("{metric}.json")),
                serde_json::to_string_pretty(&rows).expect("rows serialize"),
            ),
        };
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub crate_version: &'a str,
    pub command: &'a str,
    pub sweep: Option<&'a SweepSpec>,
    pub scenario: Option<&'a ScenarioConfig>,
    pub seeds: Vec<u64>,
    pub runs: Vec<ManifestRun>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestRun {
    pub series: String,
    pub device_count: usize,
    pub seed: u64,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn sweep_manifest<'a>(spec: &'a SweepSpec, table: &SweepTable) -> Manifest<'a> {
    Manifest {
        crate_version: env!("CARGO_PKG_VERSION"),
        command: "sweep",
        sweep: Some(spec),
        scenario: None,
        seeds: spec.seeds.clone(),
        runs: table
            .runs
            .iter()
            .map(|r| ManifestRun {
                series: r.series.clone(),
                device_count: r.device_count,
                seed: r.seed,
            })
            .collect(),
    }
}
