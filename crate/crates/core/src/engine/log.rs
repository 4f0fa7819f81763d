//! Event log: one tab-separated record per line,
//! `time<TAB>entity<TAB>kind<TAB>key=value key=value ...`, with time printed
//! to microseconds.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct EventLog {
    enabled: bool,
    lines: Vec<String>,
}

impl EventLog {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            lines: Vec::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(&mut self, time: f64, entity: impl fmt::Display, kind: &str, details: fmt::Arguments<'_>) {
        if self.enabled {
            self.lines.push(format!("{time:.6}\t{entity}\t{kind}\t{details}"));
        }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn into_lines(self) -> Vec<String> {
        self.lines
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        write_lines(&self.lines, path)
    }
}

pub fn write_lines(lines: &[String], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A parsed log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub entity: String,
    pub kind: String,
    pub details: Vec<(String, String)>,
}

impl EventRecord {
    pub fn parse(line: &str) -> Option<Self> {
        let mut parts = line.splitn(4, '\t');
        let time = parts.next()?.parse().ok()?;
        let entity = parts.next()?.to_string();
        let kind = parts.next()?.to_string();
        let details = parts
            .next()
            .unwrap_or("")
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Some(Self {
            time,
            entity,
            kind,
            details,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.details.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn num(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }
}

pub fn parse_lines<S: AsRef<str>>(lines: &[S]) -> Vec<EventRecord> {
    lines.iter().filter_map(|l| EventRecord::parse(l.as_ref())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut log = EventLog::new(true);
        log.push(1.5, "dev3", "tx", format_args!("frame={} sf={}", 7, 9));
        let r = EventRecord::parse(&log.lines()[0]).unwrap();
        assert_eq!(log.lines()[0], "1.500000\tdev3\ttx\tframe=7 sf=9");
        assert_eq!(r.entity, "dev3");
        assert_eq!(r.num("sf"), Some(9.0));
        assert_eq!(r.get("missing"), None);
    }

    #[test]
    fn disabled_log_stays_empty() {
        let mut log = EventLog::new(false);
        log.push(0.0, "x", "y", format_args!(""));
        assert!(log.lines().is_empty());
    }
}
