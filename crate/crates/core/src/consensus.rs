//! Simplified hourly consensus snapshots and archive queries.
//!
//! The wire form is JSONL, one snapshot per line:
//! `{"valid_after": <unix>, "relays": [{"fp": "<40 hex>", "nick": "...",
//! "ip": "a.b.c.d", "port": n, "bw": n, "flags": ["HSDir", ...]}]}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hs_protocol::{Fingerprint, HsDirRing};

pub const SNAPSHOT_INTERVAL: u64 = 3600;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Constraint { line: usize, message: String },
    #[error("line {line}: valid_after {current} not after previous snapshot {previous}")]
    Ordering { line: usize, current: u64, previous: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no snapshot at or before requested time {0}")]
    NoData(u64),
    #[error("archive is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Flag {
    HSDir,
    Guard,
    Running,
    Valid,
}

/// Stable server identity used for fingerprint-change tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Identity {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl Serialize for Identity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayEntry {
    pub fingerprint: Fingerprint,
    pub nickname: String,
    pub ip: Ipv4Addr,
    pub or_port: u16,
    pub bandwidth: u64,
    pub flags: HashSet<Flag>,
}

impl RelayEntry {
    pub fn identity(&self) -> Identity {
        Identity { ip: self.ip, port: self.or_port }
    }

    pub fn has_flag(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusSnapshot {
    pub valid_after: u64,
    pub relays: Vec<RelayEntry>,
}

impl ConsensusSnapshot {
    /// Checks hour alignment, fingerprint uniqueness, per-snapshot
    /// (ip, port) uniqueness, and the 2-relays-per-IP cap.
    pub fn validate(&self) -> Result<(), String> {
        if self.valid_after % SNAPSHOT_INTERVAL != 0 {
            return Err(format!("valid_after {} not hour-aligned", self.valid_after));
        }
        let mut fps = HashSet::new();
        let mut identities = HashSet::new();
        let mut per_ip: HashMap<Ipv4Addr, u32> = HashMap::new();
        for relay in &self.relays {
            if !fps.insert(relay.fingerprint) {
                return Err(format!("duplicate fingerprint {}", relay.fingerprint));
            }
            if !identities.insert(relay.identity()) {
                return Err(format!("duplicate identity {}", relay.identity()));
            }
            let count = per_ip.entry(relay.ip).or_insert(0);
            *count += 1;
            if *count > 2 {
                return Err(format!("more than 2 relays on ip {}", relay.ip));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConsensusArchive {
    snapshots: Vec<ConsensusSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FingerprintChangeEvent {
    pub identity: Identity,
    pub nickname: String,
    pub old_fp: Fingerprint,
    pub new_fp: Fingerprint,
    pub at: u64,
}

// Wire representation.
#[derive(Serialize, Deserialize)]
struct WireSnapshot {
    valid_after: u64,
    relays: Vec<WireRelay>,
}

#[derive(Serialize, Deserialize)]
struct WireRelay {
    fp: String,
    nick: String,
    ip: String,
    port: u16,
    bw: u64,
    flags: Vec<Flag>,
}

impl TryFrom<WireSnapshot> for ConsensusSnapshot {
    type Error = String;

    fn try_from(w: WireSnapshot) -> Result<Self, String> {
        let mut relays = Vec::with_capacity(w.relays.len());
        for r in w.relays {
            if r.nick.is_empty() || r.nick.len() > 19 {
                return Err(format!("nickname {:?} must be 1-19 chars", r.nick));
            }
            if r.port == 0 {
                return Err(format!("relay {} has port 0", r.fp));
            }
            relays.push(RelayEntry {
                fingerprint: Fingerprint::from_hex(&r.fp).map_err(|e| e.to_string())?,
                nickname: r.nick,
                ip: r.ip.parse().map_err(|_| format!("bad ip {:?}", r.ip))?,
                or_port: r.port,
                bandwidth: r.bw,
                flags: r.flags.into_iter().collect(),
            });
        }
        Ok(ConsensusSnapshot { valid_after: w.valid_after, relays })
    }
}

impl From<&ConsensusSnapshot> for WireSnapshot {
    fn from(s: &ConsensusSnapshot) -> Self {
        WireSnapshot {
            valid_after: s.valid_after,
            relays: s
                .relays
                .iter()
                .map(|r| {
                    let mut flags: Vec<Flag> = r.flags.iter().copied().collect();
                    flags.sort();
                    WireRelay {
                        fp: r.fingerprint.to_hex(),
                        nick: r.nickname.clone(),
                        ip: r.ip.to_string(),
                        port: r.or_port,
                        bw: r.bandwidth,
                        flags,
                    }
                })
                .collect(),
        }
    }
}

impl ConsensusArchive {
    /// Builds an archive, checking snapshot validity and strict time order.
    pub fn from_snapshots(snapshots: Vec<ConsensusSnapshot>) -> Result<Self, ArchiveError> {
        let mut previous: Option<u64> = None;
        for (i, snap) in snapshots.iter().enumerate() {
            let line = i + 1;
            snap.validate()
                .map_err(|message| ArchiveError::Constraint { line, message })?;
            if let Some(prev) = previous {
                if snap.valid_after <= prev {
                    return Err(ArchiveError::Ordering {
                        line,
                        current: snap.valid_after,
                        previous: prev,
                    });
                }
            }
            previous = Some(snap.valid_after);
        }
        Ok(ConsensusArchive { snapshots })
    }

    pub fn load<R: Read>(source: R) -> Result<Self, ArchiveError> {
        let reader = BufReader::new(source);
        let mut snapshots = Vec::new();
        let mut previous: Option<u64> = None;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let wire: WireSnapshot = serde_json::from_str(&line)
                .map_err(|source| ArchiveError::Parse { line: line_no, source })?;
            let snap: ConsensusSnapshot = wire
                .try_into()
                .map_err(|message| ArchiveError::Constraint { line: line_no, message })?;
            snap.validate()
                .map_err(|message| ArchiveError::Constraint { line: line_no, message })?;
            if let Some(prev) = previous {
                if snap.valid_after <= prev {
                    return Err(ArchiveError::Ordering {
                        line: line_no,
                        current: snap.valid_after,
                        previous: prev,
                    });
                }
            }
            previous = Some(snap.valid_after);
            snapshots.push(snap);
        }
        Ok(ConsensusArchive { snapshots })
    }

    pub fn write<W: Write>(&self, mut sink: W) -> Result<(), ArchiveError> {
        for snap in &self.snapshots {
            let wire = WireSnapshot::from(snap);
            serde_json::to_writer(&mut sink, &wire).map_err(std::io::Error::other)?;
            sink.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn snapshots(&self) -> &[ConsensusSnapshot] {
        &self.snapshots
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn first_time(&self) -> Option<u64> {
        self.snapshots.first().map(|s| s.valid_after)
    }

    pub fn last_time(&self) -> Option<u64> {
        self.snapshots.last().map(|s| s.valid_after)
    }

    /// Latest snapshot with valid_after <= t.
    pub fn snapshot_at(&self, t: u64) -> Result<&ConsensusSnapshot, ArchiveError> {
        if self.snapshots.is_empty() {
            return Err(ArchiveError::Empty);
        }
        let idx = self.snapshots.partition_point(|s| s.valid_after <= t);
        if idx == 0 {
            return Err(ArchiveError::NoData(t));
        }
        Ok(&self.snapshots[idx - 1])
    }

    /// Ring of HSDir-flagged relays in the snapshot in force at `t`.
    pub fn hsdir_ring_at(&self, t: u64) -> Result<HsDirRing, ArchiveError> {
        let snap = self.snapshot_at(t)?;
        Ok(HsDirRing::from_fingerprints(
            snap.relays
                .iter()
                .filter(|r| r.has_flag(Flag::HSDir))
                .map(|r| r.fingerprint)
                .collect(),
        ))
    }

    /// valid_after of the earliest snapshot containing `fp`, if any.
    pub fn relay_first_seen(&self, fp: &Fingerprint) -> Option<u64> {
        self.snapshots
            .iter()
            .find(|s| s.relays.iter().any(|r| r.fingerprint == *fp))
            .map(|s| s.valid_after)
    }

    /// One event per observed fingerprint change at a stable (ip, port)
    /// identity, in time order.
    pub fn fingerprint_changes(&self) -> Vec<FingerprintChangeEvent> {
        let mut last_seen: BTreeMap<Identity, Fingerprint> = BTreeMap::new();
        let mut events = Vec::new();
        for snap in &self.snapshots {
            for relay in &snap.relays {
                let id = relay.identity();
                match last_seen.get(&id) {
                    Some(&old_fp) if old_fp != relay.fingerprint => {
                        events.push(FingerprintChangeEvent {
                            identity: id,
                            nickname: relay.nickname.clone(),
                            old_fp,
                            new_fp: relay.fingerprint,
                            at: snap.valid_after,
                        });
                        last_seen.insert(id, relay.fingerprint);
                    }
                    Some(_) => {}
                    None => {
                        last_seen.insert(id, relay.fingerprint);
                    }
                }
            }
        }
        events
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relay(fp_byte: u8, ip: [u8; 4], port: u16, flags: &[Flag]) -> RelayEntry {
        let mut fp = [0u8; 20];
        fp[19] = fp_byte;
        fp[0] = fp_byte;
        RelayEntry {
            fingerprint: Fingerprint(fp),
            nickname: format!("relay{fp_byte}"),
            ip: Ipv4Addr::from(ip),
            or_port: port,
            bandwidth: 100,
            flags: flags.iter().copied().collect(),
        }
    }

    fn snap(valid_after: u64, relays: Vec<RelayEntry>) -> ConsensusSnapshot {
        ConsensusSnapshot { valid_after, relays }
    }

    #[test]
    fn load_empty_stream() {
        let archive = ConsensusArchive::load(&b""[..]).unwrap();
        assert!(archive.is_empty());
    }

    #[test]
    fn load_two_line_minimal() {
        let input = concat!(
            r#"{"valid_after":3600,"relays":[{"fp":"00000000000000000000000000000000000000aa","nick":"a","ip":"10.0.0.1","port":9001,"bw":5,"flags":["Running"]}]}"#,
            "\n",
            r#"{"valid_after":7200,"relays":[{"fp":"00000000000000000000000000000000000000bb","nick":"b","ip":"10.0.0.2","port":9001,"bw":5,"flags":["HSDir"]}]}"#,
            "\n",
        );
        let archive = ConsensusArchive::load(input.as_bytes()).unwrap();
        assert_eq!(archive.snapshots().len(), 2);
    }

    #[test]
    fn load_rejects_non_monotonic() {
        let input = concat!(
            r#"{"valid_after":7200,"relays":[]}"#,
            "\n",
            r#"{"valid_after":3600,"relays":[]}"#,
            "\n",
        );
        match ConsensusArchive::load(input.as_bytes()) {
            Err(ArchiveError::Ordering { line: 2, .. }) => {}
            other => panic!("expected ordering error at line 2, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_three_relays_per_ip() {
        let relays: Vec<String> = (0..3)
            .map(|i| {
                format!(
                    r#"{{"fp":"{:040x}","nick":"n{i}","ip":"10.0.0.1","port":{},"bw":1,"flags":[]}}"#,
                    i + 1,
                    9001 + i
                )
            })
            .collect();
        let input = format!(r#"{{"valid_after":3600,"relays":[{}]}}"#, relays.join(","));
        match ConsensusArchive::load(input.as_bytes()) {
            Err(ArchiveError::Constraint { line: 1, message }) => {
                assert!(message.contains("more than 2 relays"));
            }
            other => panic!("expected constraint error, got {other:?}"),
        }
    }

    #[test]
    fn load_reports_parse_error_line() {
        let input = "{\"valid_after\":3600,\"relays\":[]}\nnot json\n";
        match ConsensusArchive::load(input.as_bytes()) {
            Err(ArchiveError::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error at line 2, got {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let archive = ConsensusArchive::from_snapshots(vec![
            snap(3600, vec![relay(1, [10, 0, 0, 1], 9001, &[Flag::HSDir, Flag::Running])]),
            snap(7200, vec![relay(2, [10, 0, 0, 2], 9001, &[Flag::Guard])]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        archive.write(&mut buf).unwrap();
        let reloaded = ConsensusArchive::load(&buf[..]).unwrap();
        assert_eq!(archive, reloaded);
    }

    #[test]
    fn hsdir_ring_selection() {
        let relays = vec![
            relay(1, [10, 0, 0, 1], 9001, &[Flag::HSDir]),
            relay(2, [10, 0, 0, 2], 9001, &[Flag::HSDir]),
            relay(3, [10, 0, 0, 3], 9001, &[Flag::HSDir]),
            relay(4, [10, 0, 0, 4], 9001, &[Flag::Running]),
            relay(5, [10, 0, 0, 5], 9001, &[]),
        ];
        let archive =
            ConsensusArchive::from_snapshots(vec![snap(3600, relays.clone()), snap(7200, relays)])
                .unwrap();
        // filter to HSDir flag
        assert_eq!(archive.hsdir_ring_at(3600).unwrap().len(), 3);
        // boundary inclusive, step function between snapshots
        assert_eq!(archive.snapshot_at(3600).unwrap().valid_after, 3600);
        assert_eq!(archive.snapshot_at(7000).unwrap().valid_after, 3600);
        assert!(matches!(archive.hsdir_ring_at(100), Err(ArchiveError::NoData(100))));
    }

    #[test]
    fn first_seen_semantics() {
        let a = relay(1, [10, 0, 0, 1], 9001, &[]);
        let b = relay(2, [10, 0, 0, 2], 9001, &[]);
        let archive = ConsensusArchive::from_snapshots(vec![
            snap(3600, vec![a.clone()]),
            snap(7200, vec![]),
            snap(10800, vec![a.clone()]),
        ])
        .unwrap();
        assert_eq!(archive.relay_first_seen(&a.fingerprint), Some(3600));
        assert_eq!(archive.relay_first_seen(&b.fingerprint), None);
    }

    #[test]
    fn fingerprint_change_events() {
        let mut a = relay(1, [10, 0, 0, 1], 9001, &[]);
        let b = relay(2, [10, 0, 0, 1], 9001, &[]);
        let archive = ConsensusArchive::from_snapshots(vec![
            snap(3600, vec![a.clone()]),
            snap(7200, vec![b.clone()]),
            snap(10800, vec![a.clone()]),
        ])
        .unwrap();
        let events = archive.fingerprint_changes();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].old_fp, a.fingerprint);
        assert_eq!(events[0].new_fp, b.fingerprint);
        assert_eq!(events[0].at, 7200);
        assert_eq!(events[1].at, 10800);

        // relay moving to a new IP keeps its fingerprint: no event
        a.ip = Ipv4Addr::new(10, 0, 0, 9);
        let moved = ConsensusArchive::from_snapshots(vec![
            snap(3600, vec![relay(1, [10, 0, 0, 1], 9001, &[])]),
            snap(7200, vec![a]),
        ])
        .unwrap();
        assert!(moved.fingerprint_changes().is_empty());
    }

    #[test]
    fn stable_identity_no_events_over_many_snapshots() {
        let a = relay(1, [10, 0, 0, 1], 9001, &[]);
        let snaps: Vec<_> = (1..=100).map(|h| snap(h * 3600, vec![a.clone()])).collect();
        let archive = ConsensusArchive::from_snapshots(snaps).unwrap();
        assert!(archive.fingerprint_changes().is_empty());
    }
}
