use std::collections::BTreeSet;
use std::path::Path;

use lorafed::engine::audit::{audit, consensus_violations, privacy_violations, reduce_metrics};
use lorafed::engine::log::parse_lines;
use lorafed::engine::setup::{DeviceSpec, GatewaySpec, SimSetup};
use lorafed::engine::{run, RunMetrics};
use lorafed::experiments::{build_scenario, run_scenario, Mode, ScenarioConfig};
use lorafed::ids::{ActorId, ClusterId, DevEui, GatewayId, Position};
use lorafed::intercluster::ClusterGraph;

fn scenario(name: &str) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("examples/scenarios")
        .join(name);
    ScenarioConfig::load(&path).expect("example scenario loads")
}

fn gateway(id: u32, x: f64, actor: u32) -> GatewaySpec {
    GatewaySpec {
        id: GatewayId(id),
        position: Position::new(x, 0.0),
        actor: ActorId(actor),
        cluster: ClusterId(0),
    }
}

fn device(x: f64, owner: u32) -> DeviceSpec {
    DeviceSpec {
        dev_eui: DevEui(0),
        owner: ActorId(owner),
        owner_gateway: GatewayId(owner),
        position: Position::new(x, 0.0),
        payload_size: 20,
        uplink_period: 120.0,
        rejoin_period: 3600.0,
        duty_limit: 0.01,
        first_wake: 1.0,
    }
}

/// Starts from a resolved scenario so every parameter block is populated,
/// then swaps in hand-placed entities.
fn fixture(mode: Mode, gateways: Vec<GatewaySpec>, devices: Vec<DeviceSpec>, duration: f64) -> SimSetup {
    let mut setup = build_scenario(mode, 0, 1).resolve(1).unwrap();
    setup.gateways = gateways;
    setup.devices = devices;
    setup.graph = ClusterGraph::from_edges(1, &[]).unwrap();
    setup.duration = duration;
    setup
}

#[test]
fn zero_devices_yield_zero_metrics() {
    for mode in [Mode::Baseline, Mode::TwoActor, Mode::Flip] {
        let out = run_scenario(&build_scenario(mode, 0, 3), 3, false).unwrap();
        assert_eq!(out.metrics, RunMetrics::default(), "{mode}");
    }
}

#[test]
fn lone_device_next_to_its_gateway_joins() {
    for mode in [Mode::Baseline, Mode::Flip] {
        let setup = fixture(mode, vec![gateway(0, 0.0, 0)], vec![device(200.0, 0)], 600.0);
        let out = run(setup, true).unwrap();
        assert_eq!(out.metrics.join_attempts, 1);
        assert_eq!(out.metrics.join_ratio, 1.0, "{mode}");
        assert_eq!(out.metrics.collisions, 0);
        assert!(out.metrics.frames_delivered_to_owner > 0);
    }
}

#[test]
fn only_hearers_enter_consensus() {
    // A and B hear the device; C is 200 km away.
    let gws = vec![gateway(0, 0.0, 0), gateway(1, 1500.0, 1), gateway(2, 200_000.0, 2)];
    let setup = fixture(Mode::Flip, gws, vec![device(300.0, 2)], 120.0);
    let out = run(setup, true).unwrap();
    let recs = parse_lines(&out.log);
    let first_join = recs
        .iter()
        .find(|r| r.kind == "tx" && r.get("type") == Some("join"))
        .and_then(|r| r.get("frame"))
        .unwrap()
        .to_string();
    let started: BTreeSet<&str> = recs
        .iter()
        .filter(|r| r.kind == "consensus_start" && r.get("join") == Some(first_join.as_str()))
        .map(|r| r.entity.as_str())
        .collect();
    assert_eq!(started, BTreeSet::from(["gw0", "gw1"]));
    let heard: BTreeSet<&str> = recs
        .iter()
        .filter(|r| r.kind == "rx" && r.get("frame") == Some(first_join.as_str()))
        .map(|r| r.entity.as_str())
        .collect();
    assert_eq!(heard, started);
    let handlers = recs
        .iter()
        .filter(|r| r.kind == "handler" && r.get("join") == Some(first_join.as_str()))
        .count();
    assert_eq!(handlers, 1);
    assert_eq!(out.metrics.join_ratio, 1.0);
}

#[test]
fn unreachable_device_never_joins() {
    let setup = fixture(
        Mode::Baseline,
        vec![gateway(0, 0.0, 0)],
        vec![device(300_000.0, 0)],
        900.0,
    );
    let out = run(setup, true).unwrap();
    assert_eq!(out.metrics.join_attempts, 1);
    assert_eq!(out.metrics.join_successes, 0);
    assert!(out.metrics.unheard_frames >= out.metrics.join_requests);
}

#[test]
fn replay_is_byte_identical() {
    let cfg = build_scenario(Mode::Flip, 150, 11);
    let a = run_scenario(&cfg, 11, true).unwrap();
    let b = run_scenario(&cfg, 11, true).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.metrics, b.metrics);
    let c = run_scenario(&cfg, 12, true).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn logging_does_not_change_the_run() {
    let cfg = build_scenario(Mode::TwoActor, 120, 4);
    let quiet = run_scenario(&cfg, 4, false).unwrap();
    let loud = run_scenario(&cfg, 4, true).unwrap();
    assert!(quiet.log.is_empty());
    assert_eq!(quiet.metrics, loud.metrics);
}

#[test]
fn log_reduces_to_reported_metrics() {
    for mode in [Mode::Baseline, Mode::TwoActor, Mode::Flip] {
        let out = run_scenario(&build_scenario(mode, 200, 5), 5, true).unwrap();
        let recs = parse_lines(&out.log);
        assert_eq!(recs.len(), out.log.len(), "every line parses");
        assert_eq!(reduce_metrics(&recs), out.metrics, "{mode}");
    }
}

#[test]
fn multicluster_runs_audit_clean() {
    let cfg = scenario("multicluster_delegation.toml");
    for &seed in &cfg.seeds {
        let out = run_scenario(&cfg, seed, true).unwrap();
        let report = audit(
            &out.log,
            &out.metrics,
            cfg.devices.duty_limit,
            cfg.protocol.gateway_duty,
        );
        assert!(report.clean(), "seed {seed}: {report:?}");
        let recs = parse_lines(&out.log);
        assert!(consensus_violations(&recs).is_empty());
        assert!(privacy_violations(&recs).is_empty());
        assert!(out.metrics.inter_cluster_messages > 0, "seed {seed} crossed no cluster");
        let transit = recs
            .iter()
            .filter(|r| r.kind == "decrypt" && r.get("role") == Some("transit"))
            .count();
        assert!(transit > 0, "seed {seed}: no transit decrypt attempts");
        let blind_handler = recs
            .iter()
            .filter(|r| r.kind == "decrypt" && r.get("role") == Some("handler") && r.get("result") == Some("opaque"))
            .count();
        assert!(blind_handler > 0, "seed {seed}: every handler was also an owner");
    }
}

#[test]
fn renter_reads_delegated_device() {
    let cfg = scenario("multicluster_delegation.toml");
    let out = run_scenario(&cfg, 1, true).unwrap();
    let recs = parse_lines(&out.log);
    let renter_reads = recs
        .iter()
        .filter(|r| r.kind == "decrypt" && r.get("dev") == Some("dev0") && r.get("role") == Some("renter"))
        .filter(|r| r.get("result") == Some("payload"))
        .count();
    assert!(renter_reads > 0);
    assert!(recs
        .iter()
        .any(|r| r.kind == "keys" && r.get("dev") == Some("dev0") && r.get("renter") == Some("gw4")));
}
