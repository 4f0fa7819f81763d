//! Checks that work from the event log alone.

use std::collections::{BTreeMap, BTreeSet};

use super::log::EventRecord;
use super::sim::RunMetrics;

/// Times are logged to the microsecond, so window edges get this much slack.
const TIME_SLACK: f64 = 1e-5;

/// Recomputes the run metrics from log records.
pub fn reduce_metrics(records: &[EventRecord]) -> RunMetrics {
    let mut m = RunMetrics::default();
    let mut attempted = BTreeSet::new();
    let mut joined = BTreeSet::new();
    for r in records {
        match r.kind.as_str() {
            "tx" => match r.get("type") {
                Some("join") => {
                    m.join_requests += 1;
                    attempted.insert(r.entity.clone());
                }
                Some("data") => m.frames_sent += 1,
                _ => {}
            },
            "joined" => {
                joined.insert(r.entity.clone());
            }
            "collision" => m.collisions += 1,
            "delivered" => m.frames_delivered_to_owner += 1,
            "accept_tx" => m.accepts_sent += 1,
            "accept_drop" => m.accepts_dropped += 1,
            "unheard" => m.unheard_frames += 1,
            "inter_tx" => m.inter_cluster_messages += 1,
            _ => {}
        }
    }
    m.join_attempts = attempted.len() as u64;
    m.join_successes = joined.len() as u64;
    m.finalize();
    m
}

/// Rolling-window airtime violations: `(entity, window start, airtime used)`.
pub fn duty_violations(
    records: &[EventRecord],
    device_limit: f64,
    gateway_limit: f64,
    window: f64,
) -> Vec<(String, f64, f64)> {
    let mut per_entity: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        if r.kind == "tx" || r.kind == "accept_tx" {
            if let Some(a) = r.num("airtime") {
                per_entity.entry(&r.entity).or_default().push((r.time, a));
            }
        }
    }
    let mut out = Vec::new();
    for (entity, txs) in per_entity {
        let limit = if entity.starts_with("gw") {
            gateway_limit
        } else {
            device_limit
        };
        let cap = limit * window;
        for (i, &(start, _)) in txs.iter().enumerate() {
            let used: f64 = txs[i..]
                .iter()
                .take_while(|&&(t, _)| t < start + window - TIME_SLACK)
                .map(|&(_, a)| a)
                .sum();
            if used > cap + TIME_SLACK * txs.len() as f64 {
                out.push((entity.to_string(), start, used));
            }
        }
    }
    out
}

/// Joins handled more than once, or whose participants decided differently.
pub fn consensus_violations(records: &[EventRecord]) -> Vec<String> {
    let mut handlers: BTreeMap<(String, String), u32> = BTreeMap::new();
    let mut winners: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for r in records {
        let (Some(dev), Some(join)) = (r.get("dev"), r.get("join")) else {
            continue;
        };
        let key = (dev.to_string(), join.to_string());
        match r.kind.as_str() {
            "handler" => *handlers.entry(key).or_default() += 1,
            "decide" => {
                // one consensus instance per local cluster
                let instance = (key.0, format!("{}@{}", key.1, r.get("cl").unwrap_or("")));
                if let Some(w) = r.get("winner") {
                    winners.entry(instance).or_default().insert(w.to_string());
                }
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for ((dev, join), n) in &handlers {
        if *n > 1 {
            out.push(format!("{dev} join {join}: {n} handlers"));
        }
    }
    for ((dev, join), w) in &winners {
        if w.len() > 1 {
            out.push(format!("{dev} join {join}: winners {w:?}"));
        }
    }
    out
}

/// Payload reads by anyone other than the owner or the renter named in the
/// `keys` record of that session, and any handler or transit read at all.
pub fn privacy_violations(records: &[EventRecord]) -> Vec<String> {
    let mut allowed: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    let mut out = Vec::new();
    for r in records {
        match r.kind.as_str() {
            "keys" => {
                let (Some(dev), Some(session), Some(owner)) = (r.get("dev"), r.get("session"), r.get("owner")) else {
                    out.push(format!("malformed keys record at {}", r.time));
                    continue;
                };
                let set = allowed.entry((dev.to_string(), session.to_string())).or_default();
                set.insert(owner.to_string());
                if let Some(renter) = r.get("renter").filter(|&g| g != "none") {
                    set.insert(renter.to_string());
                }
            }
            "decrypt" | "delivered" => {
                let readable = r.kind == "delivered" || r.get("result") == Some("payload");
                if !readable {
                    continue;
                }
                let role = r.get("role").unwrap_or("");
                if role == "handler" || role == "transit" {
                    out.push(format!("{} read payload as {role} at {}", r.entity, r.time));
                    continue;
                }
                let key = (
                    r.get("dev").unwrap_or("").to_string(),
                    r.get("session").unwrap_or("").to_string(),
                );
                if !allowed.get(&key).is_some_and(|s| s.contains(&r.entity)) {
                    out.push(format!(
                        "{} read {} session {} without entitlement at {}",
                        r.entity, key.0, key.1, r.time
                    ));
                }
            }
            _ => {}
        }
    }
    out
}

/// True when record times never decrease.
pub fn monotone_time(records: &[EventRecord]) -> bool {
    records.windows(2).all(|w| w[0].time <= w[1].time)
}

/// Summary of every log audit for one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub metrics_match: bool,
    pub duty: usize,
    pub consensus: usize,
    pub privacy: usize,
    pub monotone: bool,
    pub decrypt_attempts: usize,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.metrics_match && self.duty == 0 && self.consensus == 0 && self.privacy == 0 && self.monotone
    }
}

pub fn audit(lines: &[String], metrics: &RunMetrics, device_limit: f64, gateway_limit: f64) -> AuditReport {
    let records = super::log::parse_lines(lines);
    AuditReport {
        metrics_match: reduce_metrics(&records) == *metrics,
        duty: duty_violations(&records, device_limit, gateway_limit, 3600.0).len(),
        consensus: consensus_violations(&records).len(),
        privacy: privacy_violations(&records).len(),
        monotone: monotone_time(&records),
        decrypt_attempts: records.iter().filter(|r| r.kind == "decrypt").count(),
    }
}
