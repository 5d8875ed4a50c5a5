//! Descriptor-request popularity resolution.
//!
//! Builds an exact index of every descriptor ID a set of onion addresses can
//! publish under across a date window, then folds a request log into a
//! per-service ranking. Requests whose descriptor IDs fall outside the index
//! are tallied as unresolved.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::hs_protocol::{
    descriptor_id, time_period, DescriptorId, OnionAddress, ProtocolError, PERIOD_SECONDS,
};

#[derive(Debug, Error)]
pub enum PopularityError {
    #[error("date range must span at least one day")]
    EmptyRange,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("onion list line {line}: {source}")]
    OnionList { line: usize, source: ProtocolError },
    #[error("request log row {row}: {message}")]
    LogRow { row: usize, message: String },
    #[error("request log: {0}")]
    LogFormat(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Where a descriptor ID points back to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub onion: OnionAddress,
    pub period: u64,
    pub replica: u8,
}

/// Exact map from descriptor ID to its producing (onion, period, replica).
/// Colliding IDs (two distinct onions deriving the same descriptor ID) are
/// moved to `ambiguous` and never resolve.
#[derive(Debug, Clone, Default)]
pub struct DescriptorIndex {
    entries: HashMap<DescriptorId, IndexEntry>,
    ambiguous: BTreeMap<DescriptorId, Vec<IndexEntry>>,
}

impl DescriptorIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, id: &DescriptorId) -> Option<&IndexEntry> {
        self.entries.get(id)
    }

    pub fn ambiguous(&self) -> &BTreeMap<DescriptorId, Vec<IndexEntry>> {
        &self.ambiguous
    }
}

/// Indexes every (onion, day in [from, to), replica) combination. `from` and
/// `to` are unix timestamps; each onion gets one period per day in the window,
/// starting at the period current at `from`, so a 12-day window yields 12
/// periods (24 descriptor IDs) per onion.
pub fn build_index(
    onions: &[OnionAddress],
    from: u64,
    to: u64,
) -> Result<DescriptorIndex, PopularityError> {
    if to < from + PERIOD_SECONDS {
        return Err(PopularityError::EmptyRange);
    }
    let days = (to - from).div_ceil(PERIOD_SECONDS);
    let mut index = DescriptorIndex::default();
    for onion in onions {
        let first = time_period(from, onion);
        for period in first..first + days {
            for replica in 0..2u8 {
                let id = descriptor_id(onion, period, replica)?;
                let entry = IndexEntry { onion: *onion, period, replica };
                if let Some(existing) = index.ambiguous.get_mut(&id) {
                    existing.push(entry);
                    continue;
                }
                match index.entries.get(&id) {
                    Some(prev) if prev.onion != entry.onion => {
                        let prev = index.entries.remove(&id).unwrap();
                        index.ambiguous.insert(id, vec![prev, entry]);
                    }
                    Some(_) => {} // same onion re-listed; keep first
                    None => {
                        index.entries.insert(id, entry);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// One line per 16-char base32 address; blank lines and `#` comments skipped.
pub fn read_onion_list<R: Read>(source: R) -> Result<Vec<OnionAddress>, PopularityError> {
    let mut onions = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let onion = OnionAddress::parse(&text.to_ascii_lowercase())
            .map_err(|source| PopularityError::OnionList { line: i + 1, source })?;
        if seen.insert(onion.text()) {
            onions.push(onion);
        }
    }
    Ok(onions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub desc_id: DescriptorId,
    pub count: u64,
}

/// Reads a request-log CSV. Requires `desc_id_base32` and `count` columns;
/// extra columns (hour, client, guard) are ignored.
pub fn read_request_log<R: Read>(source: R) -> Result<Vec<LogEntry>, PopularityError> {
    let mut reader = csv::Reader::from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| PopularityError::LogFormat(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PopularityError::LogFormat(format!("missing column {name:?}")))
    };
    let id_col = col("desc_id_base32")?;
    let count_col = col("count")?;
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after header
        let record = record.map_err(|e| PopularityError::LogRow { row, message: e.to_string() })?;
        let field = |idx: usize| {
            record.get(idx).ok_or_else(|| PopularityError::LogRow {
                row,
                message: "short row".into(),
            })
        };
        let desc_id = DescriptorId::from_base32(field(id_col)?)
            .map_err(|e| PopularityError::LogRow { row, message: e.to_string() })?;
        let count: u64 = field(count_col)?
            .parse()
            .map_err(|e: std::num::ParseIntError| PopularityError::LogRow {
                row,
                message: e.to_string(),
            })?;
        entries.push(LogEntry { desc_id, count });
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PopularityRow {
    pub rank: usize,
    pub count: u64,
    pub onion: OnionAddress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Default)]
pub struct PopularityTable {
    pub rows: Vec<PopularityRow>,
    pub unresolved: u64,
    /// Requests matching descriptor IDs the index marked ambiguous; excluded
    /// from the ranking.
    pub ambiguous: u64,
}

impl PopularityTable {
    pub fn resolved(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn total(&self) -> u64 {
        self.resolved() + self.unresolved + self.ambiguous
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), PopularityError> {
        let mut writer = csv::Writer::from_writer(sink);
        writer
            .write_record(["rank", "count", "onion"])
            .map_err(|e| PopularityError::LogFormat(e.to_string()))?;
        for row in &self.rows {
            writer
                .write_record([row.rank.to_string(), row.count.to_string(), row.onion.text()])
                .map_err(|e| PopularityError::LogFormat(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Sums request counts per onion. Sorted by count descending, ties broken by
/// onion text ascending; ranks are contiguous from 1 (no tie-sharing).
pub fn resolve(log: &[LogEntry], index: &DescriptorIndex) -> PopularityTable {
    let mut counts: BTreeMap<String, (OnionAddress, u64)> = BTreeMap::new();
    let mut unresolved = 0u64;
    let mut ambiguous = 0u64;
    for entry in log {
        if let Some(hit) = index.lookup(&entry.desc_id) {
            counts
                .entry(hit.onion.text())
                .or_insert((hit.onion, 0))
                .1 += entry.count;
        } else if index.ambiguous.contains_key(&entry.desc_id) {
            ambiguous += entry.count;
        } else {
            unresolved += entry.count;
        }
    }
    let mut rows: Vec<(OnionAddress, u64)> = counts.into_values().collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.text().cmp(&b.0.text())));
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, (onion, count))| PopularityRow { rank: i + 1, count, onion })
        .collect();
    PopularityTable { rows, unresolved, ambiguous }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hs_protocol::period_start;
    use crate::sim::{run_simulation, HiddenServiceSpec, SimConfig};
    use std::collections::HashSet;

    fn onion(n: u8) -> OnionAddress {
        OnionAddress([n; 10])
    }

    #[test]
    fn twelve_day_window_single_onion_has_24_entries() {
        let o = onion(1);
        let from = 1_359_331_200; // 2013-01-28
        let index = build_index(&[o], from, from + 12 * 86_400).unwrap();
        assert_eq!(index.len(), 24);
        let periods: HashSet<u64> =
            index.entries.values().map(|e| e.period).collect();
        assert_eq!(periods.len(), 12);
    }

    #[test]
    fn empty_onion_list_gives_empty_index() {
        let index = build_index(&[], 0, 86_400).unwrap();
        assert!(index.is_empty());
    }

    #[test]
    fn sub_day_range_rejected() {
        assert!(matches!(
            build_index(&[onion(1)], 1000, 1000 + 86_399),
            Err(PopularityError::EmptyRange)
        ));
    }

    #[test]
    fn completeness_every_in_range_triple_found() {
        let o = onion(7);
        let from = 1_700_000_000;
        let to = from + 3 * 86_400;
        let index = build_index(&[o], from, to).unwrap();
        let first = time_period(from, &o);
        for period in first..first + 3 {
            for replica in 0..2 {
                let id = descriptor_id(&o, period, replica).unwrap();
                let hit = index.lookup(&id).expect("in-range id indexed");
                assert_eq!(hit.onion, o);
                assert_eq!(hit.replica, replica);
            }
        }
    }

    #[test]
    fn widening_window_never_loses_entries() {
        let onions: Vec<OnionAddress> = (0..5).map(onion).collect();
        let from = 1_600_000_000;
        let narrow = build_index(&onions, from, from + 2 * 86_400).unwrap();
        let wide = build_index(&onions, from - 86_400, from + 5 * 86_400).unwrap();
        for id in narrow.entries.keys() {
            assert!(wide.lookup(id).is_some());
        }
    }

    #[test]
    fn resolve_orders_by_count_then_onion() {
        let a = onion(1);
        let b = onion(2);
        let from = 1_500_000_000;
        let index = build_index(&[a, b], from, from + 86_400).unwrap();
        let id_for = |o: &OnionAddress| descriptor_id(o, time_period(from, o), 0).unwrap();
        let log = vec![
            LogEntry { desc_id: id_for(&b), count: 50 },
            LogEntry { desc_id: id_for(&a), count: 100 },
        ];
        let table = resolve(&log, &index);
        assert_eq!(table.rows.len(), 2);
        assert_eq!((table.rows[0].rank, table.rows[0].count), (1, 100));
        assert_eq!(table.rows[0].onion, a);
        assert_eq!((table.rows[1].rank, table.rows[1].count), (2, 50));
        assert_eq!(table.unresolved, 0);
    }

    #[test]
    fn tied_counts_break_by_onion_text() {
        let a = onion(3); // "amfqw..." ordering comes from base32 text
        let b = onion(9);
        let from = 1_500_000_000;
        let index = build_index(&[a, b], from, from + 86_400).unwrap();
        let id_for = |o: &OnionAddress| descriptor_id(o, time_period(from, o), 1).unwrap();
        let log = vec![
            LogEntry { desc_id: id_for(&b), count: 7 },
            LogEntry { desc_id: id_for(&a), count: 7 },
        ];
        let table = resolve(&log, &index);
        let texts: Vec<String> = table.rows.iter().map(|r| r.onion.text()).collect();
        let mut sorted = texts.clone();
        sorted.sort();
        assert_eq!(texts, sorted);
        assert_eq!(table.rows[0].rank, 1);
        assert_eq!(table.rows[1].rank, 2);
    }

    #[test]
    fn empty_log_is_empty_table() {
        let index = build_index(&[onion(1)], 0, 86_400).unwrap();
        let table = resolve(&[], &index);
        assert!(table.rows.is_empty());
        assert_eq!(table.unresolved, 0);
        assert_eq!(table.total(), 0);
    }

    #[test]
    fn conservation_and_permutation_stability() {
        let a = onion(4);
        let from = 1_500_000_000;
        let index = build_index(&[a], from, from + 86_400).unwrap();
        let known = descriptor_id(&a, time_period(from, &a), 0).unwrap();
        let mut log = vec![
            LogEntry { desc_id: known, count: 3 },
            LogEntry { desc_id: DescriptorId([0xAB; 20]), count: 11 },
            LogEntry { desc_id: known, count: 2 },
        ];
        let table = resolve(&log, &index);
        assert_eq!(table.total(), 16);
        assert_eq!(table.resolved(), 5);
        assert_eq!(table.unresolved, 11);
        log.reverse();
        assert_eq!(resolve(&log, &index), table);
    }

    #[test]
    fn collision_routes_to_ambiguous() {
        let a = onion(5);
        let b = onion(6);
        let from = 1_500_000_000;
        let mut index = build_index(&[a, b], from, from + 86_400).unwrap();
        // Force a collision: alias one of b's IDs onto an ID owned by a.
        let a_id = descriptor_id(&a, time_period(from, &a), 0).unwrap();
        let stolen = index.entries.remove(&a_id).unwrap();
        index
            .ambiguous
            .insert(a_id, vec![stolen, IndexEntry { onion: b, period: 0, replica: 0 }]);
        let table = resolve(&[LogEntry { desc_id: a_id, count: 4 }], &index);
        assert_eq!(table.ambiguous, 4);
        assert!(table.rows.is_empty());
        assert_eq!(table.total(), 4);
    }

    #[test]
    fn onion_list_parses_and_dedups() {
        let text = "msydqstlz2kzerdg\n\n# comment\nMSYDQSTLZ2KZERDG\n3g2upl4pq6kufc4m\n";
        let onions = read_onion_list(text.as_bytes()).unwrap();
        assert_eq!(onions.len(), 2);
        assert_eq!(onions[0].text(), "msydqstlz2kzerdg");
    }

    #[test]
    fn onion_list_reports_bad_line() {
        let err = read_onion_list("msydqstlz2kzerdg\nnot-an-onion\n".as_bytes()).unwrap_err();
        assert!(matches!(err, PopularityError::OnionList { line: 2, .. }));
    }

    fn sim_config(seed: u64, hours: u32, clients: u32, services: &[OnionAddress]) -> SimConfig {
        SimConfig {
            seed,
            duration_hours: hours,
            honest_relays: 40,
            client_population: clients,
            hidden_services: services
                .iter()
                .map(|o| HiddenServiceSpec { onion: o.text(), publish_offset_hours: 0 })
                .collect(),
            ..SimConfig::default()
        }
    }

    #[test]
    fn csv_round_trip_through_sim_log_format() {
        let config = sim_config(11, 40, 5, &[onion(1), onion(2)]);
        let output = run_simulation(&config).unwrap();
        let mut buf = Vec::new();
        output.write_request_log_csv(&mut buf).unwrap();
        let log = read_request_log(&buf[..]).unwrap();
        assert_eq!(log.len(), output.request_log.len());
        let total: u64 = log.iter().map(|e| e.count).sum();
        assert!(total >= log.len() as u64);
    }

    #[test]
    fn simulator_round_trip_full_recall() {
        let config = sim_config(23, 72, 20, &[onion(1), onion(2), onion(3), onion(4)]);
        let output = run_simulation(&config).unwrap();
        let onions: Vec<OnionAddress> =
            output.ground_truth.services.iter().map(|s| s.onion).collect();
        let start = config.start_time;
        let end = start + u64::from(config.duration_hours) * 3_600 + 86_400;
        let index = build_index(&onions, start.saturating_sub(86_400), end).unwrap();
        let log: Vec<LogEntry> = output
            .request_log
            .iter()
            .map(|r| LogEntry { desc_id: r.desc_id, count: r.count as u64 })
            .collect();
        let table = resolve(&log, &index);
        // oracle: everything a real service could have published during the
        // sim window must resolve; random nonexistent IDs must not
        let mut existing: HashSet<DescriptorId> = HashSet::new();
        for o in &onions {
            let first = time_period(start, o);
            let last = time_period(start + u64::from(config.duration_hours) * 3_600, o);
            for period in first..=last {
                for replica in 0..2 {
                    existing.insert(descriptor_id(o, period, replica).unwrap());
                }
            }
        }
        let aimed_at_existing: u64 = output
            .request_log
            .iter()
            .filter(|r| existing.contains(&r.desc_id))
            .map(|r| u64::from(r.count))
            .sum();
        assert_eq!(table.resolved(), aimed_at_existing);
        assert!(aimed_at_existing > 0);
        assert_eq!(table.total(), log.iter().map(|e| e.count).sum::<u64>());
        let frac = table.unresolved as f64 / table.total() as f64;
        assert!((frac - config.request_model.nonexistent_fraction).abs() < 0.05,
            "unresolved fraction {frac}");
    }

    #[test]
    fn table_csv_output_shape() {
        let a = onion(8);
        let from = 1_500_000_000;
        let index = build_index(&[a], from, from + 86_400).unwrap();
        let id = descriptor_id(&a, time_period(from, &a), 0).unwrap();
        let table = resolve(&[LogEntry { desc_id: id, count: 9 }], &index);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("rank,count,onion"));
        assert_eq!(lines.next(), Some(format!("1,9,{}", a.text()).as_str()));
    }

    #[test]
    fn period_alignment_matches_period_start() {
        // index built over an exact period window contains exactly that period
        let o = onion(2);
        let period = time_period(1_600_000_000, &o);
        let from = period_start(&o, period);
        let index = build_index(&[o], from, from + 86_400).unwrap();
        assert_eq!(index.len(), 2);
    }
}
