//! Fixed reference values. The airtime and RSSI files hold hand-derived
//! numbers, re-derived here by oracles that share no code with the library.
//! The run and graph files are snapshots; `UPDATE_GOLDEN=1` rewrites them.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::Value;

use lorafed::engine::RunMetrics;
use lorafed::experiments::{run_scenario, ScenarioConfig};
use lorafed::ids::Position;
use lorafed::intercluster::{generate_cluster_graph, GraphParams};
use lorafed::radio::{rssi_at, time_on_air, PathModel, PhyParams, SpreadingFactor};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn read_golden(name: &str) -> String {
    std::fs::read_to_string(golden(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Compares `actual` with the stored snapshot, or rewrites it on request.
fn snapshot(name: &str, actual: &Value) {
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        let text = serde_json::to_string_pretty(actual).unwrap() + "\n";
        std::fs::write(golden(name), text).unwrap();
        return;
    }
    let stored: Value = serde_json::from_str(&read_golden(name)).unwrap();
    assert_eq!(
        &stored, actual,
        "{name} drifted; rerun with UPDATE_GOLDEN=1 after review"
    );
}

/// Airtime in integer microseconds: symbol counts are exact and a symbol at
/// 125 kHz lasts 2^sf * 8 us, so no floating point is involved.
fn airtime_oracle_us(payload: i64, sf: i64, overhead: i64) -> i64 {
    let bytes = payload + overhead;
    let ldro = i64::from(sf >= 11);
    let num = 8 * bytes - 4 * sf + 28 + 16;
    let den = 4 * (sf - 2 * ldro);
    let blocks = if num <= 0 { 0 } else { (num + den - 1) / den };
    // preamble 8 + 4.25 symbols, kept in quarter symbols
    let quarter_symbols = 4 * 8 + 17 + 4 * (8 + blocks * 5);
    quarter_symbols * (1 << sf) * 8 / 4
}

#[derive(Deserialize)]
struct AirtimeCase {
    phy: String,
    payload: usize,
    sf: u8,
    seconds: f64,
}

#[test]
fn airtime_matches_hand_derived_values() {
    let cases: Vec<AirtimeCase> = serde_json::from_str(&read_golden("airtime.json")).unwrap();
    for c in cases {
        let (phy, overhead) = match c.phy.as_str() {
            "default" => (PhyParams::default(), 0),
            "calibrated" => (PhyParams::calibrated(), 33),
            other => panic!("unknown phy {other}"),
        };
        let oracle = airtime_oracle_us(c.payload as i64, i64::from(c.sf), overhead) as f64 * 1e-6;
        assert!(
            (oracle - c.seconds).abs() < 1e-9,
            "oracle disagrees with golden {}",
            c.seconds
        );
        let got = time_on_air(c.payload, SpreadingFactor::new(c.sf).unwrap(), &phy).unwrap();
        assert!(
            (got - c.seconds).abs() < 1e-9,
            "{} B SF{}: {got} vs {}",
            c.payload,
            c.sf,
            c.seconds
        );
    }
}

#[test]
fn airtime_agrees_with_oracle_everywhere() {
    for sf in 7..=12u8 {
        for payload in 1..=51usize {
            for (phy, overhead) in [(PhyParams::default(), 0), (PhyParams::calibrated(), 33)] {
                let oracle = airtime_oracle_us(payload as i64, i64::from(sf), overhead) as f64 * 1e-6;
                let got = time_on_air(payload, SpreadingFactor::new(sf).unwrap(), &phy).unwrap();
                assert!((got - oracle).abs() < 1e-9, "{payload} B SF{sf}");
            }
        }
    }
}

#[derive(Deserialize)]
struct RssiCase {
    distance_m: f64,
    rssi_dbm: f64,
}

#[test]
fn rssi_matches_hand_derived_values() {
    let cases: Vec<RssiCase> = serde_json::from_str(&read_golden("rssi.json")).unwrap();
    for c in cases {
        let got = rssi_at(
            Position::new(0.0, 0.0),
            Position::new(0.0, c.distance_m),
            14.0,
            &PathModel::default(),
        );
        assert!((got - c.rssi_dbm).abs() < 1e-4, "{} m: {got}", c.distance_m);
    }
}

#[test]
fn baseline_example_metrics_are_frozen() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/scenarios/baseline_100.toml");
    let cfg = ScenarioConfig::load(&path).unwrap();
    let metrics: RunMetrics = run_scenario(&cfg, 1, false).unwrap().metrics;
    snapshot("baseline_100_seed1.json", &serde_json::to_value(metrics).unwrap());
}

#[test]
fn generated_cluster_graph_is_frozen() {
    let params = GraphParams {
        n1: 4,
        p1: 0.6,
        n2: 3,
        p2: 0.7,
    };
    let graph = generate_cluster_graph(params, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(graph.len(), 12);
    assert!(graph.is_connected());
    let edges: Vec<[u32; 2]> = graph.edges().iter().map(|(a, b)| [a.0, b.0]).collect();
    snapshot("cluster_graph_4x3_seed7.json", &serde_json::to_value(edges).unwrap());
}
