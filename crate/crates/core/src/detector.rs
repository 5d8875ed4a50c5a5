//! Tracking detection over consensus history: five statistical rules applied
//! to the responsibility timeline of one onion address.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{Datelike, TimeZone, Utc};
use num_bigint::BigUint;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{ArchiveError, ConsensusArchive, FingerprintChangeEvent, Identity};
use crate::hs_protocol::{
    self, descriptor_id, period_start, responsible_hsdirs, ring_distance, time_period,
    DescriptorId, Fingerprint, OnionAddress,
};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid range: from {from} is not before to {to}")]
    InvalidRange { from: u64, to: u64 },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

/// Half-open unix-second analysis window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub from: u64,
    pub to: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// z in the frequency rule's mu + z*sigma threshold.
    pub z_threshold: f64,
    /// avg_dist/distance above this is a NOTE.
    pub ratio_warn: u64,
    /// avg_dist/distance above this is an ALARM.
    pub ratio_alarm: u64,
    /// Prepositioning occurrences per identity needed for SUSPICIOUS.
    pub preposition_min_occurrences: u32,
    /// "Shortly before": fingerprint changes within this many seconds before
    /// a period start count as prepositioning.
    pub change_lookback: u64,
    /// Window (seconds before first responsibility) in which a first
    /// consensus appearance counts as just-in-time HSDir acquisition.
    pub fresh_window: (u64, u64),
    /// Fingerprint switches within switch_window for SUSPICIOUS.
    pub switch_count_threshold: u32,
    pub switch_window: u64,
    /// Consecutive responsible periods needed for SUSPICIOUS (2 is a NOTE).
    pub consecutive_min_run: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            z_threshold: 3.0,
            ratio_warn: 100,
            ratio_alarm: 10_000,
            preposition_min_occurrences: 2,
            change_lookback: 7 * 86_400,
            fresh_window: (23 * 3600, 27 * 3600),
            switch_count_threshold: 3,
            switch_window: 30 * 86_400,
            consecutive_min_run: 3,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.z_threshold <= 0.0 {
            return Err("z_threshold must be positive".into());
        }
        if self.ratio_warn == 0 || self.ratio_alarm == 0 {
            return Err("ratio thresholds must be positive".into());
        }
        if self.fresh_window.0 >= self.fresh_window.1 {
            return Err("fresh_window lower bound must be below upper bound".into());
        }
        if self.preposition_min_occurrences == 0
            || self.switch_count_threshold == 0
            || self.consecutive_min_run == 0
            || self.change_lookback == 0
            || self.switch_window == 0
        {
            return Err("thresholds must be positive".into());
        }
        Ok(())
    }
}

/// One responsible-HSDir slot with its ring distance and the relay's
/// consensus identity at that time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponsibleSlot {
    pub fingerprint: Fingerprint,
    pub distance: BigUint,
    pub identity: Option<Identity>,
    pub nickname: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaEntry {
    pub desc_id: DescriptorId,
    pub slots: Vec<ResponsibleSlot>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodEntry {
    pub period: u64,
    pub upload_time: u64,
    pub ring_size: usize,
    pub degenerate: bool,
    pub replicas: [Option<ReplicaEntry>; 2],
}

impl PeriodEntry {
    pub fn responsible_fingerprints(&self) -> impl Iterator<Item = &ResponsibleSlot> {
        self.replicas
            .iter()
            .flatten()
            .flat_map(|r| r.slots.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponsibilityTimeline {
    pub onion: OnionAddress,
    pub range: TimeRange,
    pub entries: Vec<PeriodEntry>,
}

/// Computes, for every daily period starting inside `range`, both replica
/// descriptor IDs and their responsible HSDirs against the ring in force at
/// the period start. Periods where the ring has fewer than 3 members are
/// marked degenerate rather than failing.
pub fn responsibility_timeline(
    archive: &ConsensusArchive,
    onion: &OnionAddress,
    range: TimeRange,
) -> Result<ResponsibilityTimeline, DetectError> {
    if range.from >= range.to {
        return Err(DetectError::InvalidRange { from: range.from, to: range.to });
    }
    let mut entries = Vec::new();
    let first_period = time_period(range.from, onion);
    let last_period = time_period(range.to.saturating_sub(1), onion);
    for period in first_period..=last_period {
        let upload_time = period_start(onion, period);
        if upload_time < range.from || upload_time >= range.to {
            continue;
        }
        let ring = match archive.hsdir_ring_at(upload_time) {
            Ok(ring) => ring,
            Err(ArchiveError::NoData(_)) | Err(ArchiveError::Empty) => {
                entries.push(PeriodEntry {
                    period,
                    upload_time,
                    ring_size: 0,
                    degenerate: true,
                    replicas: [None, None],
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let snapshot = archive.snapshot_at(upload_time).ok();
        let lookup = |fp: &Fingerprint| -> (Option<Identity>, Option<String>) {
            snapshot
                .and_then(|s| s.relays.iter().find(|r| r.fingerprint == *fp))
                .map(|r| (Some(r.identity()), Some(r.nickname.clone())))
                .unwrap_or((None, None))
        };
        let mut replicas: [Option<ReplicaEntry>; 2] = [None, None];
        let mut degenerate = false;
        for replica in 0..2u8 {
            let desc_id = descriptor_id(onion, period, replica).expect("replica in range");
            match responsible_hsdirs(&desc_id, &ring) {
                Ok(fps) => {
                    let slots = fps
                        .iter()
                        .map(|fp| {
                            let (identity, nickname) = lookup(fp);
                            ResponsibleSlot {
                                fingerprint: *fp,
                                distance: ring_distance(&desc_id, fp),
                                identity,
                                nickname,
                            }
                        })
                        .collect();
                    replicas[replica as usize] = Some(ReplicaEntry { desc_id, slots });
                }
                Err(_) => degenerate = true,
            }
        }
        entries.push(PeriodEntry {
            period,
            upload_time,
            ring_size: ring.len(),
            degenerate,
            replicas,
        });
    }
    Ok(ResponsibilityTimeline { onion: *onion, range, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleId {
    Frequency,
    Preposition,
    DistanceRatio,
    SwitchCount,
    Consecutive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    Note,
    Suspicious,
    Alarm,
}

/// What a finding points at: a fingerprint, a stable (ip, port) identity,
/// or both.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Subject {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nickname: Option<String>,
}

impl Subject {
    fn key(&self) -> String {
        self.identity
            .clone()
            .or_else(|| self.fingerprint.clone())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    Frequency {
        count: u32,
        mu: f64,
        sigma: f64,
        threshold: f64,
        periods: u32,
        segment_from: u64,
        segment_to: u64,
    },
    Preposition {
        occurrences: Vec<PrepositionOccurrence>,
    },
    DistanceRatio {
        period: u64,
        replica: u8,
        slot: usize,
        /// Decimal integer, or "inf" when the distance is zero.
        ratio: String,
        distance: String,
        avg_distance: String,
    },
    SwitchCount {
        switches: u32,
        window_from: u64,
        window_to: u64,
        switch_times: Vec<u64>,
    },
    Consecutive {
        run_length: u32,
        first_period: u64,
        last_period: u64,
        level: SubjectLevel,
        fingerprints: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectLevel {
    Fingerprint,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrepositionKind {
    /// Fingerprint changed shortly before the relay became responsible.
    ChangeBeforeResponsibility,
    /// First consensus appearance roughly 25h before first responsibility.
    FreshArrival,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrepositionOccurrence {
    pub kind: PrepositionKind,
    pub period: u64,
    pub fingerprint: String,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleFinding {
    pub rule: RuleId,
    pub severity: Severity,
    pub subject: Subject,
    pub evidence: Evidence,
}

fn subject_for_slot(slot: &ResponsibleSlot) -> Subject {
    Subject {
        identity: slot.identity.map(|i| i.to_string()),
        fingerprint: Some(slot.fingerprint.to_hex()),
        nickname: slot.nickname.clone(),
    }
}

/// Binomial mean and standard deviation for being among the 6 responsible
/// HSDirs over `n` periods with a constant ring of `ring_size`.
pub fn binomial_stats(n: u32, ring_size: u32) -> (f64, f64) {
    let p = 6.0 / ring_size as f64;
    let mu = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    (mu, sigma)
}

/// Poisson-binomial mean and standard deviation for per-period ring sizes
/// (reduces to `binomial_stats` when the size is constant).
pub fn frequency_stats(ring_sizes: &[usize]) -> (f64, f64) {
    let mut mu = 0.0;
    let mut var = 0.0;
    for &n in ring_sizes {
        if n == 0 {
            continue;
        }
        let p = (6.0 / n as f64).min(1.0);
        mu += p;
        var += p * (1.0 - p);
    }
    (mu, var.sqrt())
}

/// Rule 1: relays responsible more often than mu + z*sigma.
pub fn rule_frequency(timeline: &ResponsibilityTimeline, config: &DetectorConfig) -> Vec<RuleFinding> {
    rule_frequency_over(&timeline.entries, config, timeline.range)
}

fn rule_frequency_over(
    entries: &[PeriodEntry],
    config: &DetectorConfig,
    segment: TimeRange,
) -> Vec<RuleFinding> {
    let usable: Vec<&PeriodEntry> = entries.iter().filter(|e| !e.degenerate).collect();
    if usable.is_empty() {
        return Vec::new();
    }
    let ring_sizes: Vec<usize> = usable.iter().map(|e| e.ring_size).collect();
    let (mu, sigma) = frequency_stats(&ring_sizes);
    let threshold = mu + config.z_threshold * sigma;

    // Count periods (not slots) a fingerprint was responsible in.
    let mut counts: BTreeMap<Fingerprint, (u32, Subject)> = BTreeMap::new();
    for entry in &usable {
        let mut seen = BTreeSet::new();
        for slot in entry.responsible_fingerprints() {
            if seen.insert(slot.fingerprint) {
                let rec = counts
                    .entry(slot.fingerprint)
                    .or_insert_with(|| (0, subject_for_slot(slot)));
                rec.0 += 1;
            }
        }
    }

    counts
        .into_iter()
        .filter(|(_, (count, _))| (*count as f64) > threshold)
        .map(|(_, (count, subject))| RuleFinding {
            rule: RuleId::Frequency,
            severity: Severity::Suspicious,
            subject,
            evidence: Evidence::Frequency {
                count,
                mu,
                sigma,
                threshold,
                periods: usable.len() as u32,
                segment_from: segment.from,
                segment_to: segment.to,
            },
        })
        .collect()
}

/// Rule 2: prepositioning. A fingerprint change shortly before becoming
/// responsible, or a first consensus appearance inside the fresh window
/// before the first responsibility.
pub fn rule_preposition(
    timeline: &ResponsibilityTimeline,
    changes: &[FingerprintChangeEvent],
    archive: &ConsensusArchive,
    config: &DetectorConfig,
) -> Vec<RuleFinding> {
    // Occurrences grouped per identity (fingerprint hex when unknown).
    let mut groups: BTreeMap<String, (Subject, Vec<PrepositionOccurrence>)> = BTreeMap::new();
    let mut push = |subject: Subject, occ: PrepositionOccurrence| {
        let entry = groups
            .entry(subject.key())
            .or_insert_with(|| (subject, Vec::new()));
        entry.1.push(occ);
    };

    let mut first_responsibility: BTreeMap<Fingerprint, (&PeriodEntry, &ResponsibleSlot)> =
        BTreeMap::new();
    for entry in &timeline.entries {
        for slot in entry.responsible_fingerprints() {
            first_responsibility.entry(slot.fingerprint).or_insert((entry, slot));

            // (a) change events within the lookback before this period start
            for ev in changes {
                if ev.new_fp == slot.fingerprint
                    && ev.at <= entry.upload_time
                    && ev.at + config.change_lookback >= entry.upload_time
                {
                    push(
                        subject_for_slot(slot),
                        PrepositionOccurrence {
                            kind: PrepositionKind::ChangeBeforeResponsibility,
                            period: entry.period,
                            fingerprint: slot.fingerprint.to_hex(),
                            at: ev.at,
                        },
                    );
                }
            }
        }
    }

    // (b) first seen within the fresh window before first responsibility
    for (fp, (entry, slot)) in &first_responsibility {
        if let Some(first_seen) = archive.relay_first_seen(fp) {
            if first_seen <= entry.upload_time {
                let age = entry.upload_time - first_seen;
                if age >= config.fresh_window.0 && age <= config.fresh_window.1 {
                    push(
                        subject_for_slot(slot),
                        PrepositionOccurrence {
                            kind: PrepositionKind::FreshArrival,
                            period: entry.period,
                            fingerprint: fp.to_hex(),
                            at: first_seen,
                        },
                    );
                }
            }
        }
    }

    groups
        .into_values()
        .map(|(subject, occurrences)| {
            let severity = if occurrences.len() as u32 >= config.preposition_min_occurrences {
                Severity::Suspicious
            } else {
                Severity::Note
            };
            RuleFinding {
                rule: RuleId::Preposition,
                severity,
                subject,
                evidence: Evidence::Preposition { occurrences },
            }
        })
        .collect()
}

/// Rule 3: avg_dist/distance per responsible slot, exact integer division.
pub fn rule_distance_ratio(
    timeline: &ResponsibilityTimeline,
    config: &DetectorConfig,
) -> Vec<RuleFinding> {
    let mut findings = Vec::new();
    for entry in &timeline.entries {
        if entry.ring_size == 0 {
            continue;
        }
        let avg = hs_protocol::ring_modulus() / BigUint::from(entry.ring_size);
        for (replica_idx, replica) in entry.replicas.iter().enumerate() {
            let Some(replica) = replica else { continue };
            for (slot_idx, slot) in replica.slots.iter().enumerate() {
                let (ratio_text, severity) = if slot.distance.is_zero() {
                    ("inf".to_string(), Some(Severity::Alarm))
                } else {
                    let ratio = &avg / &slot.distance;
                    let severity = if ratio > BigUint::from(config.ratio_alarm) {
                        Some(Severity::Alarm)
                    } else if ratio > BigUint::from(config.ratio_warn) {
                        Some(Severity::Note)
                    } else {
                        None
                    };
                    (ratio.to_string(), severity)
                };
                if let Some(severity) = severity {
                    findings.push(RuleFinding {
                        rule: RuleId::DistanceRatio,
                        severity,
                        subject: subject_for_slot(slot),
                        evidence: Evidence::DistanceRatio {
                            period: entry.period,
                            replica: replica_idx as u8,
                            slot: slot_idx,
                            ratio: ratio_text,
                            distance: slot.distance.to_string(),
                            avg_distance: avg.to_string(),
                        },
                    });
                }
            }
        }
    }
    findings
}

/// Rule 4: many fingerprint switches at one identity inside a sliding window.
pub fn rule_switch_count(
    changes: &[FingerprintChangeEvent],
    config: &DetectorConfig,
) -> Vec<RuleFinding> {
    let mut per_identity: BTreeMap<Identity, Vec<&FingerprintChangeEvent>> = BTreeMap::new();
    for ev in changes {
        per_identity.entry(ev.identity).or_default().push(ev);
    }

    let mut findings = Vec::new();
    for (identity, events) in per_identity {
        let times: Vec<u64> = events.iter().map(|e| e.at).collect();
        // Best window: maximize switches within [t_i, t_i + window].
        let mut best: Option<(u32, usize, usize)> = None;
        for i in 0..times.len() {
            let mut j = i;
            while j + 1 < times.len() && times[j + 1] <= times[i] + config.switch_window {
                j += 1;
            }
            let count = (j - i + 1) as u32;
            if best.map_or(true, |(c, _, _)| count > c) {
                best = Some((count, i, j));
            }
        }
        if let Some((count, i, j)) = best {
            if count >= config.switch_count_threshold {
                findings.push(RuleFinding {
                    rule: RuleId::SwitchCount,
                    severity: Severity::Suspicious,
                    subject: Subject {
                        identity: Some(identity.to_string()),
                        fingerprint: Some(events[j].new_fp.to_hex()),
                        nickname: Some(events[j].nickname.clone()),
                    },
                    evidence: Evidence::SwitchCount {
                        switches: count,
                        window_from: times[i],
                        window_to: times[j],
                        switch_times: times[i..=j].to_vec(),
                    },
                });
            }
        }
    }
    findings
}

/// Rule 5: maximal runs of consecutive responsible periods, tracked both per
/// fingerprint and per identity (grinding attackers rotate fingerprints, so
/// the identity level is what catches them).
pub fn rule_consecutive(
    timeline: &ResponsibilityTimeline,
    config: &DetectorConfig,
) -> Vec<RuleFinding> {
    // period sets per fingerprint and per identity
    let mut per_fp: BTreeMap<Fingerprint, (Subject, BTreeSet<u64>)> = BTreeMap::new();
    let mut per_identity: BTreeMap<Identity, (Subject, BTreeMap<u64, BTreeSet<Fingerprint>>)> =
        BTreeMap::new();
    for entry in &timeline.entries {
        for slot in entry.responsible_fingerprints() {
            per_fp
                .entry(slot.fingerprint)
                .or_insert_with(|| (subject_for_slot(slot), BTreeSet::new()))
                .1
                .insert(entry.period);
            if let Some(identity) = slot.identity {
                per_identity
                    .entry(identity)
                    .or_insert_with(|| (subject_for_slot(slot), BTreeMap::new()))
                    .1
                    .entry(entry.period)
                    .or_default()
                    .insert(slot.fingerprint);
            }
        }
    }

    let severity_for = |run: u32| -> Option<Severity> {
        if run >= config.consecutive_min_run {
            Some(Severity::Suspicious)
        } else if run == 2 {
            Some(Severity::Note)
        } else {
            None
        }
    };

    let mut findings = Vec::new();
    for (fp, (subject, periods)) in &per_fp {
        for (first, last) in maximal_runs(periods) {
            let run = (last - first + 1) as u32;
            if let Some(severity) = severity_for(run) {
                findings.push(RuleFinding {
                    rule: RuleId::Consecutive,
                    severity,
                    subject: subject.clone(),
                    evidence: Evidence::Consecutive {
                        run_length: run,
                        first_period: first,
                        last_period: last,
                        level: SubjectLevel::Fingerprint,
                        fingerprints: vec![fp.to_hex()],
                    },
                });
            }
        }
    }
    for (_, (subject, by_period)) in &per_identity {
        let periods: BTreeSet<u64> = by_period.keys().copied().collect();
        for (first, last) in maximal_runs(&periods) {
            let run = (last - first + 1) as u32;
            let fps: BTreeSet<Fingerprint> = (first..=last)
                .filter_map(|p| by_period.get(&p))
                .flatten()
                .copied()
                .collect();
            // identical to the single-fingerprint run already reported
            if fps.len() < 2 {
                continue;
            }
            if let Some(severity) = severity_for(run) {
                findings.push(RuleFinding {
                    rule: RuleId::Consecutive,
                    severity,
                    subject: subject.clone(),
                    evidence: Evidence::Consecutive {
                        run_length: run,
                        first_period: first,
                        last_period: last,
                        level: SubjectLevel::Identity,
                        fingerprints: fps.iter().map(|f| f.to_hex()).collect(),
                    },
                });
            }
        }
    }
    findings
}

fn maximal_runs(periods: &BTreeSet<u64>) -> Vec<(u64, u64)> {
    let mut runs = Vec::new();
    let mut iter = periods.iter().copied();
    let Some(mut start) = iter.next() else { return runs };
    let mut prev = start;
    for p in iter {
        if p != prev + 1 {
            runs.push((start, prev));
            start = p;
        }
        prev = p;
    }
    runs.push((start, prev));
    runs
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YearSegment {
    pub year: i32,
    pub from: u64,
    pub to: u64,
    pub periods: u32,
    pub mean_ring_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelayScore {
    pub subject: Subject,
    pub rules: Vec<RuleId>,
    pub score: u32,
    pub max_severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NicknameCluster {
    pub common: String,
    pub nicknames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuspicionReport {
    pub onion: String,
    pub from: u64,
    pub to: u64,
    pub segments: Vec<YearSegment>,
    pub findings: Vec<RuleFinding>,
    pub relay_scores: Vec<RelayScore>,
    pub nickname_clusters: Vec<NicknameCluster>,
}

impl SuspicionReport {
    pub fn max_severity(&self) -> Option<Severity> {
        self.findings.iter().map(|f| f.severity).max()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "Tracking analysis for {}.onion over [{}, {})\n",
            self.onion, self.from, self.to
        ));
        for seg in &self.segments {
            out.push_str(&format!(
                "  year {}: {} periods, mean ring size {:.1}\n",
                seg.year, seg.periods, seg.mean_ring_size
            ));
        }
        out.push_str(&format!("\n{} finding(s)\n", self.findings.len()));
        out.push_str(&format!(
            "{:<9} {:<14} {:<22} {:<40} evidence\n",
            "SEVERITY", "RULE", "IDENTITY", "FINGERPRINT"
        ));
        for f in &self.findings {
            let summary = match &f.evidence {
                Evidence::Frequency { count, threshold, .. } => {
                    format!("responsible {count} periods (threshold {threshold:.2})")
                }
                Evidence::Preposition { occurrences } => {
                    format!("{} prepositioning occurrence(s)", occurrences.len())
                }
                Evidence::DistanceRatio { period, ratio, .. } => {
                    format!("ratio {ratio} at period {period}")
                }
                Evidence::SwitchCount { switches, .. } => {
                    format!("{switches} fingerprint switches in window")
                }
                Evidence::Consecutive { run_length, first_period, last_period, .. } => {
                    format!("{run_length} consecutive periods {first_period}-{last_period}")
                }
            };
            out.push_str(&format!(
                "{:<9} {:<14} {:<22} {:<40} {}\n",
                format!("{:?}", f.severity).to_uppercase(),
                format!("{:?}", f.rule),
                f.subject.identity.as_deref().unwrap_or("-"),
                f.subject.fingerprint.as_deref().unwrap_or("-"),
                summary
            ));
        }
        out.push_str("\nTop relays by distinct rules triggered:\n");
        for score in self.relay_scores.iter().take(10) {
            out.push_str(&format!(
                "  score {} ({:?}) {} {}\n",
                score.score,
                score.max_severity,
                score.subject.identity.as_deref().unwrap_or("-"),
                score.subject.nickname.as_deref().unwrap_or("")
            ));
        }
        if !self.nickname_clusters.is_empty() {
            out.push_str("\nNickname clusters (shared substring):\n");
            for c in &self.nickname_clusters {
                out.push_str(&format!("  {:?}: {}\n", c.common, c.nicknames.join(", ")));
            }
        }
        out
    }
}

/// Runs the full five-rule analysis, segmenting the frequency rule by
/// calendar year (the ring size drifts over long ranges).
pub fn detect(
    archive: &ConsensusArchive,
    onion: &OnionAddress,
    range: TimeRange,
    config: &DetectorConfig,
) -> Result<SuspicionReport, DetectError> {
    let timeline = responsibility_timeline(archive, onion, range)?;
    let changes = archive.fingerprint_changes();

    let segments = year_segments(&timeline);
    let mut findings = Vec::new();
    for seg in &segments {
        let entries: Vec<PeriodEntry> = timeline
            .entries
            .iter()
            .filter(|e| e.upload_time >= seg.from && e.upload_time < seg.to)
            .cloned()
            .collect();
        findings.extend(rule_frequency_over(
            &entries,
            config,
            TimeRange { from: seg.from, to: seg.to },
        ));
    }
    findings.extend(rule_preposition(&timeline, &changes, archive, config));
    findings.extend(rule_distance_ratio(&timeline, config));
    findings.extend(rule_switch_count(&changes, config));
    findings.extend(rule_consecutive(&timeline, config));

    let relay_scores = score_relays(&findings);
    findings.sort_by(|a, b| {
        b.severity
            .cmp(&a.severity)
            .then(a.rule.cmp(&b.rule))
            .then(a.subject.cmp(&b.subject))
    });
    let nickname_clusters = cluster_nicknames(&findings);

    Ok(SuspicionReport {
        onion: onion.text(),
        from: range.from,
        to: range.to,
        segments,
        findings,
        relay_scores,
        nickname_clusters,
    })
}

fn year_segments(timeline: &ResponsibilityTimeline) -> Vec<YearSegment> {
    let mut by_year: BTreeMap<i32, Vec<&PeriodEntry>> = BTreeMap::new();
    for entry in &timeline.entries {
        let year = Utc
            .timestamp_opt(entry.upload_time as i64, 0)
            .single()
            .map(|dt| dt.year())
            .unwrap_or(1970);
        by_year.entry(year).or_default().push(entry);
    }
    by_year
        .into_iter()
        .map(|(year, entries)| {
            let from = Utc
                .with_ymd_and_hms(year, 1, 1, 0, 0, 0)
                .single()
                .map(|d| d.timestamp().max(0) as u64)
                .unwrap_or(0)
                .max(timeline.range.from);
            let to = Utc
                .with_ymd_and_hms(year + 1, 1, 1, 0, 0, 0)
                .single()
                .map(|d| d.timestamp().max(0) as u64)
                .unwrap_or(u64::MAX)
                .min(timeline.range.to);
            let usable: Vec<&&PeriodEntry> = entries.iter().filter(|e| !e.degenerate).collect();
            let mean_ring_size = if usable.is_empty() {
                0.0
            } else {
                usable.iter().map(|e| e.ring_size as f64).sum::<f64>() / usable.len() as f64
            };
            YearSegment { year, from, to, periods: entries.len() as u32, mean_ring_size }
        })
        .collect()
}

fn score_relays(findings: &[RuleFinding]) -> Vec<RelayScore> {
    let mut by_subject: BTreeMap<String, (Subject, BTreeSet<RuleId>, Severity)> = BTreeMap::new();
    for f in findings {
        let key = f.subject.key();
        let entry = by_subject
            .entry(key)
            .or_insert_with(|| (f.subject.clone(), BTreeSet::new(), f.severity));
        entry.1.insert(f.rule);
        entry.2 = entry.2.max(f.severity);
        if entry.0.nickname.is_none() {
            entry.0.nickname = f.subject.nickname.clone();
        }
    }
    let mut scores: Vec<RelayScore> = by_subject
        .into_values()
        .map(|(subject, rules, max_severity)| RelayScore {
            score: rules.len() as u32,
            rules: rules.into_iter().collect(),
            subject,
            max_severity,
        })
        .collect();
    scores.sort_by(|a, b| {
        b.score
            .cmp(&a.score)
            .then(b.max_severity.cmp(&a.max_severity))
            .then(a.subject.cmp(&b.subject))
    });
    scores
}

fn longest_common_substring(a: &str, b: &str) -> String {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut best = (0usize, 0usize); // (len, end index in a)
    let mut prev = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        let mut cur = vec![0usize; b.len() + 1];
        for j in 1..=b.len() {
            if a[i - 1] == b[j - 1] {
                cur[j] = prev[j - 1] + 1;
                if cur[j] > best.0 {
                    best = (cur[j], i);
                }
            }
        }
        prev = cur;
    }
    a[best.1 - best.0..best.1].iter().collect()
}

/// Groups finding subjects whose nicknames share a >=6-character substring.
/// Presentation only; never raises severity.
fn cluster_nicknames(findings: &[RuleFinding]) -> Vec<NicknameCluster> {
    let nicknames: BTreeSet<String> = findings
        .iter()
        .filter_map(|f| f.subject.nickname.clone())
        .collect();
    let nicknames: Vec<String> = nicknames.into_iter().collect();
    let mut clusters: Vec<(String, BTreeSet<String>)> = Vec::new();
    for i in 0..nicknames.len() {
        for j in (i + 1)..nicknames.len() {
            let common = longest_common_substring(&nicknames[i], &nicknames[j]);
            if common.chars().count() >= 6 {
                if let Some(cluster) = clusters.iter_mut().find(|(c, _)| *c == common) {
                    cluster.1.insert(nicknames[i].clone());
                    cluster.1.insert(nicknames[j].clone());
                } else {
                    clusters.push((
                        common,
                        [nicknames[i].clone(), nicknames[j].clone()].into_iter().collect(),
                    ));
                }
            }
        }
    }
    clusters
        .into_iter()
        .map(|(common, names)| NicknameCluster {
            common,
            nicknames: names.into_iter().collect(),
        })
        .collect()
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}
