//! End-to-end acceptance gate. Each test covers one numbered criterion and
//! prints a single PASS line; run with `cargo test --test acceptance -- --nocapture`
//! to see them.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Binomial;

use hsdirscope::consensus::Flag;
use hsdirscope::detector::{
    binomial_stats, detect, DetectorConfig, RuleId, Severity, TimeRange,
};
use hsdirscope::hs_protocol::{responsible_hsdirs, DescriptorId, Fingerprint, HsDirRing, OnionAddress};
use hsdirscope::sim::{
    guard_compromise_probability, run_simulation, verify_archive_against_trace, AttackerSpec,
    HiddenServiceSpec, SimConfig, SimOutput, Strategy,
};

const TARGET: &str = "aaaaaaaaaaaaaaaa";
const START: u64 = 1_704_067_200; // 2024-01-01T00:00:00Z, the simulator default

fn service(onion: &str) -> HiddenServiceSpec {
    HiddenServiceSpec { onion: onion.to_string(), publish_offset_hours: 0 }
}

fn full_range(config: &SimConfig) -> TimeRange {
    TimeRange {
        from: config.start_time,
        to: config.start_time + u64::from(config.duration_hours) * 3600,
    }
}

fn attacker_fps(output: &SimOutput) -> BTreeSet<Fingerprint> {
    output
        .ground_truth
        .hourly_attacker_fingerprints
        .iter()
        .flat_map(|h| h.fingerprints.iter().copied())
        .collect()
}

// ---------------------------------------------------------------------------
// 1. responsible_hsdirs agrees with a brute-force ring scan

#[test]
fn criterion_1_ring_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..10_000 {
        let size = rng.gen_range(3..=50usize);
        let fps: BTreeSet<Fingerprint> =
            std::iter::repeat_with(|| Fingerprint(rng.gen())).take(size).collect();
        let desc = DescriptorId(rng.gen());

        // oracle: sort all fingerprints as integers, take the first 3
        // strictly greater than the descriptor ID, wrapping around
        let sorted: Vec<Fingerprint> = fps.iter().copied().collect();
        let mut expected: Vec<Fingerprint> =
            sorted.iter().filter(|f| f.0 > desc.0).copied().collect();
        expected.extend(sorted.iter().filter(|f| f.0 <= desc.0).copied());
        expected.truncate(3);

        let ring = HsDirRing::from_fingerprints(sorted.clone());
        let got = responsible_hsdirs(&desc, &ring).unwrap();
        assert_eq!(got.to_vec(), expected, "disagreement in case {case}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}, budget 10s");
    println!("acceptance 1 (ring oracle equivalence, 10^4 cases in {elapsed:?}): PASS");
}

// ---------------------------------------------------------------------------
// 2. binomial frequency threshold for the 2013-scale directory

#[test]
fn criterion_2_binomial_threshold() {
    let (mu, sigma) = binomial_stats(334, 757);
    let threshold = mu + 3.0 * sigma;
    assert!(
        (7.4..=7.6).contains(&threshold),
        "mu + 3 sigma = {threshold}, expected in [7.4, 7.6]"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dist = Binomial::new(334, 6.0 / 757.0).unwrap();
    let trials = 100_000;
    let hits = (0..trials).filter(|_| dist.sample(&mut rng) >= 8).count();
    let tail = hits as f64 / trials as f64;
    assert!(
        (0.0005..=0.006).contains(&tail),
        "P(count >= 8) = {tail}, expected in [0.0005, 0.006]"
    );
    println!("acceptance 2 (binomial threshold {threshold:.3}, MC tail {tail:.5}): PASS");
}

// ---------------------------------------------------------------------------
// 3. planted grinding attacker is the top-scored identity

fn grind_config(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        duration_hours: 96,
        honest_relays: 200,
        client_population: 0,
        hidden_services: vec![service(TARGET)],
        attacker: Some(AttackerSpec {
            strategy: Strategy::Grind,
            ip_count: 1,
            relays_per_ip: 2,
            target_onion: TARGET.to_string(),
            grind_width: 1e-5,
            guard_count: 0,
        }),
        ..SimConfig::default()
    }
}

#[test]
fn criterion_3_planted_attack_detection() {
    let started = Instant::now();
    let onion = OnionAddress::parse(TARGET).unwrap();
    let config_template = grind_config(0);
    let range = full_range(&config_template);
    let detector = DetectorConfig::default();

    let mut top_hits = 0;
    for seed in 0..50u64 {
        let config = grind_config(seed);
        let output = run_simulation(&config).unwrap();
        verify_archive_against_trace(&output).unwrap();
        let attacker_ids: BTreeSet<&String> =
            output.ground_truth.attacker_identities.iter().collect();
        let fps = attacker_fps(&output);

        let report = detect(&output.archive, &onion, range, &detector).unwrap();

        let top_is_attacker = report
            .relay_scores
            .first()
            .and_then(|s| s.subject.identity.as_ref())
            .map(|id| attacker_ids.contains(id))
            .unwrap_or(false);
        if top_is_attacker {
            top_hits += 1;
        }

        // whenever the attacker holds a responsible slot, the planted
        // fingerprint must trip the distance-ratio alarm
        let holds_slot = output.ground_truth.services.iter().any(|s| {
            s.periods.iter().any(|p| {
                p.replicas
                    .iter()
                    .any(|r| r.responsible.iter().any(|fp| fps.contains(fp)))
            })
        });
        if holds_slot {
            let alarm = report.findings.iter().any(|f| {
                f.rule == RuleId::DistanceRatio
                    && f.severity == Severity::Alarm
                    && f.subject
                        .identity
                        .as_ref()
                        .map(|id| attacker_ids.contains(id))
                        .unwrap_or(false)
            });
            assert!(alarm, "seed {seed}: attacker holds a slot but no ratio alarm");
        }
    }
    let elapsed = started.elapsed();
    assert!(top_hits >= 48, "top identity correct in only {top_hits}/50 runs");
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2 min");
    println!("acceptance 3 (planted attack: top identity {top_hits}/50, {elapsed:?}): PASS");
}

// ---------------------------------------------------------------------------
// 4. honest simulations stay quiet

#[test]
fn criterion_4_honest_false_positive_control() {
    let onion = OnionAddress::parse(TARGET).unwrap();
    let detector = DetectorConfig::default();
    let mut suspicious_subjects = 0usize;
    let mut total_relays = 0usize;

    for seed in 100..150u64 {
        let config = SimConfig {
            seed,
            duration_hours: 96,
            honest_relays: 200,
            client_population: 0,
            hidden_services: vec![service(TARGET)],
            ..SimConfig::default()
        };
        let output = run_simulation(&config).unwrap();
        verify_archive_against_trace(&output).unwrap();
        total_relays += config.honest_relays as usize;

        let report = detect(&output.archive, &onion, full_range(&config), &detector).unwrap();
        assert!(
            !report.findings.iter().any(|f| f.severity == Severity::Alarm),
            "seed {seed}: honest run produced an ALARM"
        );
        let subjects: BTreeSet<String> = report
            .findings
            .iter()
            .filter(|f| f.severity == Severity::Suspicious)
            .map(|f| {
                f.subject
                    .identity
                    .clone()
                    .or_else(|| f.subject.fingerprint.clone())
                    .unwrap_or_default()
            })
            .collect();
        suspicious_subjects += subjects.len();
    }
    let rate = suspicious_subjects as f64 / total_relays as f64;
    assert!(rate <= 0.01, "suspicious rate per relay {rate} > 1%");
    println!("acceptance 4 (honest control: 0 alarms, suspicious rate {rate:.4}): PASS");
}

// ---------------------------------------------------------------------------
// 5. hypergeometric guard-compromise probability vs Monte Carlo

#[test]
fn criterion_5_guard_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (total, attacker) in [(100u64, 1u64), (1000, 10), (50, 25)] {
        let closed = guard_compromise_probability(total, attacker, 3).unwrap();
        let trials = 1_000_000;
        let hits = (0..trials)
            .filter(|_| {
                rand::seq::index::sample(&mut rng, total as usize, 3)
                    .iter()
                    .any(|i| (i as u64) < attacker)
            })
            .count();
        let empirical = hits as f64 / trials as f64;
        assert!(
            (closed - empirical).abs() < 0.001,
            "G={total} a={attacker}: closed {closed} vs MC {empirical}"
        );
    }
    println!("acceptance 5 (guard probability closed form vs 10^6 MC): PASS");
}

// ---------------------------------------------------------------------------
// 6. deanonymisation rate matches 0.5 * a / G

#[test]
fn criterion_6_deanonymisation_rate() {
    let guard_count = 5u32;
    let config = SimConfig {
        seed: 6,
        duration_hours: 96,
        honest_relays: 100,
        hourly_churn: 0.0,
        // every honest relay is past the guard uptime requirement, so the
        // guard pool is constant for the whole run
        initial_uptime_range: (9 * 86_400, 9 * 86_400),
        client_population: 2_600,
        hidden_services: vec![service(TARGET)],
        attacker: Some(AttackerSpec {
            strategy: Strategy::GuardAndHsdir,
            ip_count: 3,
            relays_per_ip: 1,
            target_onion: TARGET.to_string(),
            grind_width: 1e-5,
            guard_count,
        }),
        request_model: hsdirscope::sim::RequestModel {
            zipf_exponent: 1.0,
            nonexistent_fraction: 0.0,
            requests_per_client_hour: 1.0,
        },
        ..SimConfig::default()
    };
    let output = run_simulation(&config).unwrap();
    verify_archive_against_trace(&output).unwrap();

    let fps = attacker_fps(&output);
    let truth = &output.ground_truth.services[0];

    // periods where the attacker owns all 3 replica-0 slots
    let covered: Vec<_> = truth
        .periods
        .iter()
        .filter(|p| {
            p.replicas
                .first()
                .map(|r| r.responsible.len() == 3 && r.responsible.iter().all(|fp| fps.contains(fp)))
                .unwrap_or(false)
        })
        .collect();
    assert!(!covered.is_empty(), "attacker never captured replica 0");

    let covered_descs: BTreeSet<DescriptorId> = covered
        .iter()
        .flat_map(|p| p.replicas.iter().map(|r| r.desc_id))
        .collect();
    let covered_hours: Vec<(u64, u64)> =
        covered.iter().map(|p| (p.upload_time, p.upload_time + 86_400)).collect();

    let n = output
        .request_log
        .iter()
        .filter(|r| covered_descs.contains(&r.desc_id))
        .count();
    let hits = output
        .deanon_events
        .iter()
        .filter(|e| covered_hours.iter().any(|(a, b)| e.hour >= *a && e.hour < *b))
        .count();
    assert!(n >= 100_000, "only {n} requests during covered periods, need 10^5");

    let snapshot = output.archive.snapshot_at(covered_hours[0].0).unwrap();
    let total_guards = snapshot.relays.iter().filter(|r| r.has_flag(Flag::Guard)).count() as f64;
    let p = 0.5 * f64::from(guard_count) / total_guards;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let empirical = hits as f64 / n as f64;
    assert!(
        (empirical - p).abs() <= 3.0 * sigma,
        "empirical {empirical} vs expected {p} (3 sigma = {})",
        3.0 * sigma
    );
    println!(
        "acceptance 6 (deanon rate {empirical:.5} vs 0.5a/G {p:.5} over {n} requests): PASS"
    );
}

// ---------------------------------------------------------------------------
// 7. popularity round-trip over 10^5 requests

#[test]
fn criterion_7_popularity_round_trip() {
    use hsdirscope::hs_protocol::{descriptor_id, time_period};
    use hsdirscope::popularity::{build_index, resolve, LogEntry};

    let onions: Vec<OnionAddress> = (0..4u8).map(|n| OnionAddress([n; 10])).collect();
    let config = SimConfig {
        seed: 7,
        duration_hours: 96,
        honest_relays: 100,
        client_population: 1_200,
        hidden_services: onions.iter().map(|o| service(&o.text())).collect(),
        ..SimConfig::default()
    };
    let output = run_simulation(&config).unwrap();
    verify_archive_against_trace(&output).unwrap();
    let total: u64 = output.request_log.iter().map(|r| u64::from(r.count)).sum();
    assert!(total >= 100_000, "only {total} requests, need 10^5");

    let end = START + u64::from(config.duration_hours) * 3600 + 86_400;
    let index = build_index(&onions, START - 86_400, end).unwrap();
    let log: Vec<LogEntry> = output
        .request_log
        .iter()
        .map(|r| LogEntry { desc_id: r.desc_id, count: u64::from(r.count) })
        .collect();
    let table = resolve(&log, &index);

    // 100% recall: every request whose ID any listed service could have
    // published inside the window resolves
    let mut existing: BTreeSet<DescriptorId> = BTreeSet::new();
    for o in &onions {
        let first = time_period(START, o);
        let last = time_period(START + u64::from(config.duration_hours) * 3600, o);
        for period in first..=last {
            for replica in 0..2 {
                existing.insert(descriptor_id(o, period, replica).unwrap());
            }
        }
    }
    let aimed: u64 = output
        .request_log
        .iter()
        .filter(|r| existing.contains(&r.desc_id))
        .map(|r| u64::from(r.count))
        .sum();
    assert_eq!(table.resolved(), aimed, "some existing-descriptor requests failed to resolve");
    assert_eq!(table.total(), total);

    let unresolved_frac = table.unresolved as f64 / total as f64;
    assert!(
        (unresolved_frac - 0.8).abs() <= 0.01,
        "unresolved fraction {unresolved_frac}, expected 0.8 +- 0.01"
    );
    println!(
        "acceptance 7 (popularity round trip: recall 100%, unresolved {unresolved_frac:.4}): PASS"
    );
}

// ---------------------------------------------------------------------------
// 8. archive replay oracle: 25h HSDir rule and 2-per-IP cap

#[test]
fn criterion_8_flag_rule_conformance() {
    let configs: Vec<SimConfig> = vec![
        // churny honest runs
        SimConfig {
            seed: 81,
            duration_hours: 120,
            honest_relays: 150,
            hourly_churn: 0.02,
            ..SimConfig::default()
        },
        SimConfig {
            seed: 82,
            duration_hours: 96,
            honest_relays: 60,
            hourly_churn: 0.05,
            client_population: 10,
            hidden_services: vec![service(TARGET)],
            ..SimConfig::default()
        },
        grind_config(83),
        // shadow takeover
        SimConfig {
            seed: 84,
            duration_hours: 96,
            honest_relays: 80,
            hidden_services: vec![service(TARGET)],
            attacker: Some(AttackerSpec {
                strategy: Strategy::Shadow,
                ip_count: 5,
                relays_per_ip: 10,
                target_onion: TARGET.to_string(),
                grind_width: 1e-5,
                guard_count: 0,
            }),
            ..SimConfig::default()
        },
        // guard + hsdir
        SimConfig {
            seed: 85,
            duration_hours: 96,
            honest_relays: 80,
            client_population: 50,
            hidden_services: vec![service(TARGET)],
            attacker: Some(AttackerSpec {
                strategy: Strategy::GuardAndHsdir,
                ip_count: 3,
                relays_per_ip: 1,
                target_onion: TARGET.to_string(),
                grind_width: 1e-5,
                guard_count: 4,
            }),
            ..SimConfig::default()
        },
    ];
    let count = configs.len();
    for config in configs {
        let output = run_simulation(&config).unwrap();
        verify_archive_against_trace(&output)
            .unwrap_or_else(|e| panic!("seed {}: {e}", config.seed));
    }
    println!("acceptance 8 (flag replay oracle clean on {count} simulations): PASS");
}

// ---------------------------------------------------------------------------
// 9. shadow schedule activates all 50 relays within one 24h period

#[test]
fn criterion_9_shadow_takeover() {
    let config = SimConfig {
        seed: 9,
        duration_hours: 72,
        honest_relays: 80,
        hidden_services: vec![service(TARGET)],
        attacker: Some(AttackerSpec {
            strategy: Strategy::Shadow,
            ip_count: 5,
            relays_per_ip: 10,
            target_onion: TARGET.to_string(),
            grind_width: 1e-5,
            guard_count: 0,
        }),
        ..SimConfig::default()
    };
    let output = run_simulation(&config).unwrap();
    verify_archive_against_trace(&output).unwrap();

    let all_fps = attacker_fps(&output);
    assert_eq!(all_fps.len(), 50, "expected 50 distinct attacker fingerprints");

    // takeover starts once the relays clear the 25h uptime bar; every relay
    // must serve as an active, HSDir-flagged consensus entry within 24h
    let takeover_start = START + config.hsdir_uptime_requirement + 3600;
    let window = (takeover_start, takeover_start + 24 * 3600);
    let mut seen: BTreeSet<Fingerprint> = BTreeSet::new();
    for snapshot in output.archive.snapshots() {
        if snapshot.valid_after < window.0 || snapshot.valid_after > window.1 {
            continue;
        }
        for relay in &snapshot.relays {
            if all_fps.contains(&relay.fingerprint) && relay.has_flag(Flag::HSDir) {
                seen.insert(relay.fingerprint);
            }
        }
    }
    assert_eq!(
        seen.len(),
        50,
        "only {}/50 shadow relays reached active HSDir duty in the 24h window",
        seen.len()
    );
    println!("acceptance 9 (shadow takeover: 50/50 active HSDirs within 24h): PASS");
}
