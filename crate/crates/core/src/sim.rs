//! Hourly discrete-time simulator: honest relay churn, authority flag
//! assignment, hidden-service publication, descriptor-request traffic, and
//! the three attacker strategies with ground-truth labels.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::net::Ipv4Addr;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{
    ArchiveError, ConsensusArchive, ConsensusSnapshot, Flag, Identity, RelayEntry,
};
use crate::detector::{self, TimeRange};
use crate::hs_protocol::{
    descriptor_id, period_start, ring_distance, ring_modulus, time_period, DescriptorId,
    Fingerprint, OnionAddress,
};

pub const DEFAULT_HSDIR_UPTIME: u64 = 90_000; // 25 hours
pub const DEFAULT_GUARD_UPTIME: u64 = 8 * 86_400;
pub const GRIND_ATTEMPT_CAP: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("fingerprint grinding gave up after {0} attempts")]
    GrindGaveUp(u64),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("config parse error: {0}")]
    ConfigParse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestModel {
    /// Zipf exponent over the configured service order (0 = uniform).
    pub zipf_exponent: f64,
    /// Fraction of requests aimed at never-published descriptor IDs.
    pub nonexistent_fraction: f64,
    /// Mean requests per client per hour (Poisson).
    pub requests_per_client_hour: f64,
}

impl Default for RequestModel {
    fn default() -> Self {
        RequestModel {
            zipf_exponent: 1.0,
            nonexistent_fraction: 0.8,
            requests_per_client_hour: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Grind,
    Shadow,
    GuardAndHsdir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerSpec {
    pub strategy: Strategy,
    pub ip_count: u32,
    pub relays_per_ip: u32,
    pub target_onion: String,
    /// Grinding window as a fraction of the average ring gap.
    #[serde(default = "default_grind_width")]
    pub grind_width: f64,
    #[serde(default)]
    pub guard_count: u32,
}

fn default_grind_width() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenServiceSpec {
    pub onion: String,
    #[serde(default)]
    pub publish_offset_hours: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_hours: u32,
    pub honest_relays: u32,
    pub hourly_churn: f64,
    pub hsdir_uptime_requirement: u64,
    pub guard_uptime_requirement: u64,
    pub max_relays_per_ip: u32,
    /// Hour-aligned unix start of the simulation clock.
    pub start_time: u64,
    /// Pre-existing continuous uptime assigned to honest relays at start,
    /// drawn uniformly from this range (seconds).
    pub initial_uptime_range: (u64, u64),
    /// Probability that a rejoining relay comes back with a new fingerprint.
    pub rejoin_new_fingerprint_prob: f64,
    pub hidden_services: Vec<HiddenServiceSpec>,
    pub attacker: Option<AttackerSpec>,
    pub client_population: u32,
    pub request_model: RequestModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            duration_hours: 72,
            honest_relays: 100,
            hourly_churn: 0.002,
            hsdir_uptime_requirement: DEFAULT_HSDIR_UPTIME,
            guard_uptime_requirement: DEFAULT_GUARD_UPTIME,
            max_relays_per_ip: 2,
            start_time: 1_704_067_200, // 2024-01-01T00:00:00Z
            initial_uptime_range: (0, 30 * 86_400),
            rejoin_new_fingerprint_prob: 0.1,
            hidden_services: Vec::new(),
            attacker: None,
            client_population: 0,
            request_model: RequestModel::default(),
        }
    }
}

impl SimConfig {
    /// Accepts either JSON or TOML text.
    pub fn from_str_auto(text: &str) -> Result<Self, SimError> {
        if let Ok(cfg) = serde_json::from_str::<SimConfig>(text) {
            return Ok(cfg);
        }
        toml::from_str::<SimConfig>(text).map_err(|e| SimError::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.hourly_churn) {
            problems.push("hourly_churn must be in [0, 1]".to_string());
        }
        if !(0.0..=1.0).contains(&self.rejoin_new_fingerprint_prob) {
            problems.push("rejoin_new_fingerprint_prob must be in [0, 1]".to_string());
        }
        if !(0.0..=1.0).contains(&self.request_model.nonexistent_fraction) {
            problems.push("request_model.nonexistent_fraction must be in [0, 1]".to_string());
        }
        if self.request_model.requests_per_client_hour < 0.0 {
            problems.push("request_model.requests_per_client_hour must be nonnegative".into());
        }
        if self.duration_hours == 0 {
            problems.push("duration_hours must be positive".to_string());
        }
        if self.start_time % 3600 != 0 {
            problems.push("start_time must be hour-aligned".to_string());
        }
        if self.max_relays_per_ip == 0 {
            problems.push("max_relays_per_ip must be positive".to_string());
        }
        if self.initial_uptime_range.0 > self.initial_uptime_range.1 {
            problems.push("initial_uptime_range must be ordered".to_string());
        }
        for (i, hs) in self.hidden_services.iter().enumerate() {
            if OnionAddress::parse(&hs.onion).is_err() {
                problems.push(format!("hidden_services[{i}].onion is not a valid address"));
            }
        }
        if let Some(attacker) = &self.attacker {
            if attacker.ip_count == 0 || attacker.relays_per_ip == 0 {
                problems.push("attacker.ip_count and attacker.relays_per_ip must be >= 1".into());
            }
            if !(attacker.grind_width > 0.0 && attacker.grind_width <= 1.0) {
                problems.push("attacker.grind_width must be in (0, 1]".to_string());
            }
            if OnionAddress::parse(&attacker.target_onion).is_err() {
                problems.push("attacker.target_onion is not a valid address".to_string());
            }
            if matches!(attacker.strategy, Strategy::Shadow)
                && attacker.relays_per_ip <= self.max_relays_per_ip
            {
                problems.push(
                    "attacker.relays_per_ip must exceed max_relays_per_ip for shadowing".into(),
                );
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(problems))
        }
    }
}

/// Per-hour runtime state of one relay process, as the authorities see it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelayRuntime {
    pub ip: Ipv4Addr,
    pub port: u16,
    pub nickname: String,
    pub fingerprint: Fingerprint,
    pub bandwidth: u64,
    pub running: bool,
    /// Start of the current continuous run. Uptime survives fingerprint
    /// changes; it resets only when the relay goes down.
    pub up_since: u64,
    pub attacker: bool,
}

impl RelayRuntime {
    pub fn identity(&self) -> Identity {
        Identity { ip: self.ip, port: self.port }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlagParams {
    pub hsdir_uptime: u64,
    pub guard_uptime: u64,
    pub max_relays_per_ip: u32,
}

impl From<&SimConfig> for FlagParams {
    fn from(c: &SimConfig) -> Self {
        FlagParams {
            hsdir_uptime: c.hsdir_uptime_requirement,
            guard_uptime: c.guard_uptime_requirement,
            max_relays_per_ip: c.max_relays_per_ip,
        }
    }
}

/// Authority flag assignment for one hour: per IP only the
/// `max_relays_per_ip` highest-bandwidth running relays enter the snapshot
/// (ties broken by lower fingerprint); HSDir requires continuous uptime of
/// at least the configured threshold, Guard additionally needs bandwidth at
/// or above the running median. Shadow relays (running but over the IP cap)
/// keep accruing uptime and are simply absent from the snapshot.
pub fn assign_flags(relays: &[RelayRuntime], t: u64, params: &FlagParams) -> ConsensusSnapshot {
    let running: Vec<&RelayRuntime> = relays.iter().filter(|r| r.running).collect();

    let median_bw = {
        let mut bws: Vec<u64> = running.iter().map(|r| r.bandwidth).collect();
        bws.sort_unstable();
        if bws.is_empty() {
            0
        } else {
            bws[bws.len() / 2]
        }
    };

    let mut per_ip: HashMap<Ipv4Addr, Vec<&RelayRuntime>> = HashMap::new();
    for relay in &running {
        per_ip.entry(relay.ip).or_default().push(relay);
    }

    let mut entries = Vec::new();
    for (_, mut group) in per_ip {
        group.sort_by(|a, b| {
            b.bandwidth
                .cmp(&a.bandwidth)
                .then(a.fingerprint.cmp(&b.fingerprint))
        });
        for relay in group.into_iter().take(params.max_relays_per_ip as usize) {
            let uptime = t.saturating_sub(relay.up_since);
            let mut flags: std::collections::HashSet<Flag> =
                [Flag::Running, Flag::Valid].into_iter().collect();
            if uptime >= params.hsdir_uptime {
                flags.insert(Flag::HSDir);
            }
            if uptime >= params.guard_uptime && relay.bandwidth >= median_bw {
                flags.insert(Flag::Guard);
            }
            entries.push(RelayEntry {
                fingerprint: relay.fingerprint,
                nickname: relay.nickname.clone(),
                ip: relay.ip,
                or_port: relay.port,
                bandwidth: relay.bandwidth,
                flags,
            });
        }
    }
    entries.sort_by(|a, b| a.fingerprint.cmp(&b.fingerprint));
    ConsensusSnapshot { valid_after: t, relays: entries }
}

/// Uniform BigUint in [0, bound).
fn sample_below(bound: &BigUint, rng: &mut impl Rng) -> BigUint {
    debug_assert!(!bound.is_zero());
    let bits = bound.bits();
    let bytes = bits.div_ceil(8) as usize;
    let top_mask = if bits % 8 == 0 { 0xff } else { (1u16 << (bits % 8)) as u8 - 1 };
    loop {
        let mut buf = vec![0u8; bytes];
        rng.fill(&mut buf[..]);
        buf[0] &= top_mask;
        let candidate = BigUint::from_bytes_be(&buf);
        if &candidate < bound {
            return candidate;
        }
    }
}

/// Uniform fingerprint in the window (target, target + width] mod 2^160.
/// Same distribution rejection grinding converges to, without the cost.
pub fn plant_fingerprint(
    target: &DescriptorId,
    width: &BigUint,
    rng: &mut impl Rng,
) -> Fingerprint {
    let offset = sample_below(width, rng) + BigUint::one();
    let value = (target.to_biguint() + offset) % ring_modulus();
    Fingerprint::from_biguint(&value)
}

/// Rejection-samples uniform 160-bit fingerprints until one lands in
/// (target, target + width]. Returns the fingerprint and the attempt count;
/// expected attempts are 2^160 / width.
pub fn grind_fingerprint(
    target: &DescriptorId,
    width: &BigUint,
    rng: &mut impl Rng,
) -> Result<(Fingerprint, u64), SimError> {
    for attempt in 1..=GRIND_ATTEMPT_CAP {
        let candidate = Fingerprint(rng.gen());
        let distance = ring_distance(target, &candidate);
        if !distance.is_zero() && &distance <= width {
            return Ok((candidate, attempt));
        }
    }
    Err(SimError::GrindGaveUp(GRIND_ATTEMPT_CAP))
}

/// Binomial(n, k) as f64.
fn binom(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut num = BigUint::one();
    let mut den = BigUint::one();
    for i in 0..k {
        num *= BigUint::from(n - i);
        den *= BigUint::from(i + 1);
    }
    let num = num.to_f64().unwrap_or(f64::INFINITY);
    let den = den.to_f64().unwrap_or(f64::INFINITY);
    num / den
}

/// Probability that at least one of an attacker's `attacker_guards` relays
/// is in a client's guard set of `set_size`, out of `total_guards` total:
/// 1 - C(G-a, k) / C(G, k).
pub fn guard_compromise_probability(
    total_guards: u64,
    attacker_guards: u64,
    set_size: u64,
) -> Result<f64, SimError> {
    if attacker_guards > total_guards || set_size > total_guards {
        return Err(SimError::Validation(vec![format!(
            "need attacker_guards <= total_guards and set_size <= total_guards, got a={attacker_guards} G={total_guards} k={set_size}"
        )]));
    }
    // exact ratio of falling factorials, evaluated term by term
    let mut ratio = 1.0f64;
    for i in 0..set_size {
        ratio *= (total_guards - attacker_guards - i) as f64 / (total_guards - i) as f64;
        if total_guards - attacker_guards < i + 1 {
            ratio = 0.0;
            break;
        }
    }
    let _ = binom(total_guards, set_size); // keep the closed form handy for checks
    Ok(1.0 - ratio)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rotation {
    pub hour_offset: u32,
    /// (ip index, relay index within IP) pairs taken offline.
    pub deactivate: Vec<(u32, u32)>,
    /// Shadow relays expected to enter the consensus as a result.
    pub promote: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TakeoverPlan {
    pub ip_count: u32,
    pub relays_per_ip: u32,
    pub rotations: Vec<Rotation>,
}

impl TakeoverPlan {
    /// Expected fraction of descriptor-space positions with at least one
    /// attacker relay among the 3 successors, for `ring_size` total HSDirs
    /// and the plan's relays placed uniformly.
    pub fn coverage_fraction(&self, ring_size: u64) -> f64 {
        let attackers = u64::from(self.ip_count) * u64::from(self.relays_per_ip);
        if ring_size == 0 {
            return 0.0;
        }
        if attackers >= ring_size {
            return 1.0;
        }
        guard_compromise_probability(ring_size, attackers, 3.min(ring_size))
            .unwrap_or(1.0)
    }
}

/// Schedule that rotates active pairs so all n*m relays serve as HSDirs
/// within one takeover period. Relays 2k and 2k+1 on each IP are active
/// during rotation slot k.
pub fn shadow_takeover_plan(n_ips: u32, m_per_ip: u32, period_hours: u32) -> TakeoverPlan {
    let slots = m_per_ip.div_ceil(2);
    let slot_len = (period_hours / slots.max(1)).max(1);
    let mut rotations = Vec::new();
    for k in 1..slots {
        let mut deactivate = Vec::new();
        let mut promote = Vec::new();
        for ip in 0..n_ips {
            deactivate.push((ip, 2 * (k - 1)));
            if 2 * (k - 1) + 1 < m_per_ip {
                deactivate.push((ip, 2 * (k - 1) + 1));
            }
            promote.push((ip, 2 * k));
            if 2 * k + 1 < m_per_ip {
                promote.push((ip, 2 * k + 1));
            }
        }
        rotations.push(Rotation { hour_offset: k * slot_len, deactivate, promote });
    }
    TakeoverPlan { ip_count: n_ips, relays_per_ip: m_per_ip, rotations }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestRecord {
    /// Hour-aligned unix timestamp of the request.
    pub hour: u64,
    pub desc_id: DescriptorId,
    pub count: u32,
    pub client_id: u32,
    pub guard_fp: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeanonEvent {
    pub hour: u64,
    pub client_id: u32,
    /// Synthetic address surrogate standing in for the revealed client IP.
    pub client_ip: String,
    pub region: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaTruth {
    pub desc_id: DescriptorId,
    pub responsible: Vec<Fingerprint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodTruth {
    pub period: u64,
    pub upload_time: u64,
    pub degenerate: bool,
    pub replicas: Vec<ReplicaTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceTruth {
    pub onion: OnionAddress,
    pub publish_offset_hours: u32,
    pub periods: Vec<PeriodTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HourlyAttackerFps {
    pub hour: u64,
    pub fingerprints: Vec<Fingerprint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct GroundTruth {
    pub attacker_identities: Vec<String>,
    pub attacker_guards: Vec<Fingerprint>,
    pub hourly_attacker_fingerprints: Vec<HourlyAttackerFps>,
    pub services: Vec<ServiceTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimOutput {
    pub config: SimConfig,
    #[serde(skip)]
    pub archive: ConsensusArchive,
    pub ground_truth: GroundTruth,
    pub request_log: Vec<RequestRecord>,
    pub deanon_events: Vec<DeanonEvent>,
    /// Per-hour relay runtime state, kept so flag assignment can be replayed
    /// and verified against the emitted archive.
    #[serde(skip)]
    pub trace: Vec<(u64, Vec<RelayRuntime>)>,
}

impl SimOutput {
    pub fn write_archive<W: Write>(&self, sink: W) -> Result<(), SimError> {
        Ok(self.archive.write(sink)?)
    }

    pub fn write_request_log_csv<W: Write>(&self, sink: W) -> Result<(), SimError> {
        let mut writer = csv::Writer::from_writer(sink);
        writer
            .write_record(["hour", "desc_id_base32", "count", "client_id", "guard_fp_hex"])
            .map_err(csv_err)?;
        for row in &self.request_log {
            writer
                .write_record([
                    row.hour.to_string(),
                    row.desc_id.to_base32(),
                    row.count.to_string(),
                    row.client_id.to_string(),
                    row.guard_fp.to_hex(),
                ])
                .map_err(csv_err)?;
        }
        writer.flush().map_err(|e| SimError::Archive(ArchiveError::Io(e)))?;
        Ok(())
    }

    pub fn write_ground_truth_json<W: Write>(&self, sink: W) -> Result<(), SimError> {
        serde_json::to_writer_pretty(sink, &self.ground_truth)
            .map_err(|e| SimError::ConfigParse(e.to_string()))
    }

    /// Deanonymisation hits over requests that resolve to the attacker's
    /// target service: (events, target requests, empirical rate).
    pub fn empirical_deanon_rate(&self) -> Option<(usize, usize, f64)> {
        let attacker = self.config.attacker.as_ref()?;
        let target = OnionAddress::parse(&attacker.target_onion).ok()?;
        let truth = self.ground_truth.services.iter().find(|s| s.onion == target)?;
        let target_descs: BTreeSet<DescriptorId> = truth
            .periods
            .iter()
            .flat_map(|p| p.replicas.iter().map(|r| r.desc_id))
            .collect();
        let target_requests = self
            .request_log
            .iter()
            .filter(|r| target_descs.contains(&r.desc_id))
            .count();
        if target_requests == 0 {
            return Some((0, 0, 0.0));
        }
        let rate = self.deanon_events.len() as f64 / target_requests as f64;
        Some((self.deanon_events.len(), target_requests, rate))
    }
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::ConfigParse(e.to_string())
}

struct AttackerState {
    spec: AttackerSpec,
    target: OnionAddress,
    relay_range: std::ops::Range<usize>,
    guard_range: std::ops::Range<usize>,
    /// Next target period to plant fingerprints for (grind strategies).
    next_period: u64,
    plan: Option<TakeoverPlan>,
    takeover_start_hour: u32,
}

/// Runs the full simulation: hourly relay churn and flag assignment,
/// attacker actions, then service timelines and client request traffic
/// derived from the emitted archive. Deterministic for a given seed.
pub fn run_simulation(config: &SimConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    let mut world_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut attacker_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa77a_c4e8_1d2b_3f90);
    let mut client_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc11e_57a0_9b64_2d17);

    let mut relays = build_honest_relays(config, &mut world_rng);
    let mut attacker_state = setup_attacker(config, &mut relays)?;

    let flag_params = FlagParams::from(config);
    let mut snapshots = Vec::with_capacity(config.duration_hours as usize);
    let mut trace = Vec::with_capacity(config.duration_hours as usize);
    let mut hourly_attacker_fps = Vec::new();

    for hour in 0..config.duration_hours {
        let t = config.start_time + u64::from(hour) * 3600;
        if hour > 0 {
            churn_honest(config, &mut relays, t, &mut world_rng);
        }
        if let Some(state) = attacker_state.as_mut() {
            attacker_act(config, state, &mut relays, t, hour, &snapshots, &mut attacker_rng)?;
        }
        let snapshot = assign_flags(&relays, t, &flag_params);
        trace.push((t, relays.clone()));
        if attacker_state.is_some() {
            let fps: Vec<Fingerprint> = relays
                .iter()
                .filter(|r| r.attacker && r.running)
                .map(|r| r.fingerprint)
                .collect();
            hourly_attacker_fps.push(HourlyAttackerFps { hour: t, fingerprints: fps });
        }
        snapshots.push(snapshot);
    }

    let archive = ConsensusArchive::from_snapshots(snapshots)?;
    let end_time = config.start_time + u64::from(config.duration_hours) * 3600;

    // Service responsibility ground truth, recomputed from the emitted
    // archive exactly the way the detector will see it.
    let mut services = Vec::new();
    for spec in &config.hidden_services {
        let onion = OnionAddress::parse(&spec.onion).expect("validated");
        let publish_start = config.start_time + u64::from(spec.publish_offset_hours) * 3600;
        let truth = if publish_start < end_time {
            service_truth(&archive, &onion, publish_start, end_time, spec.publish_offset_hours)
        } else {
            ServiceTruth {
                onion,
                publish_offset_hours: spec.publish_offset_hours,
                periods: Vec::new(),
            }
        };
        services.push(truth);
    }

    let (attacker_identities, attacker_guards) = match (&attacker_state, &config.attacker) {
        (Some(state), Some(_)) => {
            let ids: Vec<String> = relays[state.relay_range.clone()]
                .iter()
                .chain(&relays[state.guard_range.clone()])
                .map(|r| r.identity().to_string())
                .collect();
            let guards: Vec<Fingerprint> = relays[state.guard_range.clone()]
                .iter()
                .map(|r| r.fingerprint)
                .collect();
            (ids, guards)
        }
        _ => (Vec::new(), Vec::new()),
    };

    let ground_truth = GroundTruth {
        attacker_identities,
        attacker_guards: attacker_guards.clone(),
        hourly_attacker_fingerprints: hourly_attacker_fps,
        services,
    };

    let (request_log, deanon_events) =
        simulate_clients(config, &archive, &ground_truth, &mut client_rng);

    Ok(SimOutput {
        config: config.clone(),
        archive,
        ground_truth,
        request_log,
        deanon_events,
        trace,
    })
}

fn service_truth(
    archive: &ConsensusArchive,
    onion: &OnionAddress,
    from: u64,
    to: u64,
    publish_offset_hours: u32,
) -> ServiceTruth {
    let timeline =
        detector::responsibility_timeline(archive, onion, TimeRange { from, to })
            .expect("valid range");
    let periods = timeline
        .entries
        .iter()
        .map(|e| PeriodTruth {
            period: e.period,
            upload_time: e.upload_time,
            degenerate: e.degenerate,
            replicas: e
                .replicas
                .iter()
                .flatten()
                .map(|r| ReplicaTruth {
                    desc_id: r.desc_id,
                    responsible: r.slots.iter().map(|s| s.fingerprint).collect(),
                })
                .collect(),
        })
        .collect();
    ServiceTruth { onion: *onion, publish_offset_hours, periods }
}

fn build_honest_relays(config: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<RelayRuntime> {
    let mut relays = Vec::with_capacity(config.honest_relays as usize);
    for i in 0..config.honest_relays {
        // every 13th relay shares its predecessor's IP to exercise the cap
        let shares_ip = i % 13 == 12;
        let base = if shares_ip { i - 1 } else { i };
        let ip = Ipv4Addr::new(10, ((base >> 8) & 0xff) as u8, (base & 0xff) as u8, 1);
        let port = if shares_ip { 9002 } else { 9001 };
        let initial = rng.gen_range(config.initial_uptime_range.0..=config.initial_uptime_range.1);
        relays.push(RelayRuntime {
            ip,
            port,
            nickname: format!("relay{i:04}"),
            fingerprint: Fingerprint(rng.gen()),
            bandwidth: rng.gen_range(100..10_000),
            running: true,
            up_since: config.start_time.saturating_sub(initial),
            attacker: false,
        });
    }
    relays
}

fn churn_honest(config: &SimConfig, relays: &mut [RelayRuntime], t: u64, rng: &mut ChaCha8Rng) {
    for relay in relays.iter_mut().filter(|r| !r.attacker) {
        if relay.running {
            if rng.gen_bool(config.hourly_churn) {
                relay.running = false;
            }
        } else if rng.gen_bool(config.hourly_churn) {
            relay.running = true;
            relay.up_since = t;
            if rng.gen_bool(config.rejoin_new_fingerprint_prob) {
                relay.fingerprint = Fingerprint(rng.gen());
            }
        }
    }
}

fn setup_attacker(
    config: &SimConfig,
    relays: &mut Vec<RelayRuntime>,
) -> Result<Option<AttackerState>, SimError> {
    let Some(spec) = config.attacker.clone() else { return Ok(None) };
    let target = OnionAddress::parse(&spec.target_onion)
        .map_err(|e| SimError::Validation(vec![e.to_string()]))?;

    let relay_start = relays.len();
    let mut idx = 0u32;
    for ip_idx in 0..spec.ip_count {
        let ip = Ipv4Addr::new(172, 16, (ip_idx / 250) as u8, (ip_idx % 250 + 1) as u8);
        for j in 0..spec.relays_per_ip {
            // shadow relays get strictly decreasing bandwidth so the rotation
            // order matches the takeover plan's relay indices
            let bandwidth = match spec.strategy {
                Strategy::Shadow => 30_000 - u64::from(j) * 100,
                _ => 20_000,
            };
            relays.push(RelayRuntime {
                ip,
                port: 9001 + j as u16,
                nickname: format!("tracknode{idx:03}"),
                fingerprint: fingerprint_from_index(0xAA, idx),
                bandwidth,
                running: true,
                up_since: config.start_time,
                attacker: true,
            });
            idx += 1;
        }
    }
    let relay_range = relay_start..relays.len();

    let guard_start = relays.len();
    if matches!(spec.strategy, Strategy::GuardAndHsdir) {
        for g in 0..spec.guard_count {
            let ip = Ipv4Addr::new(172, 17, (g / 250) as u8, (g % 250 + 1) as u8);
            relays.push(RelayRuntime {
                ip,
                port: 9001,
                nickname: format!("trackguard{g:03}"),
                fingerprint: fingerprint_from_index(0xBB, g),
                bandwidth: 50_000,
                running: true,
                up_since: config
                    .start_time
                    .saturating_sub(config.guard_uptime_requirement + 30 * 86_400),
                attacker: true,
            });
        }
    }
    let guard_range = guard_start..relays.len();

    let takeover_start_hour = (config.hsdir_uptime_requirement / 3600) as u32 + 1;
    let plan = match spec.strategy {
        Strategy::Shadow => Some(shadow_takeover_plan(spec.ip_count, spec.relays_per_ip, 24)),
        _ => None,
    };

    Ok(Some(AttackerState {
        spec,
        target,
        relay_range,
        guard_range,
        next_period: 0,
        plan,
        takeover_start_hour,
    }))
}

/// Deterministic, well-spread synthetic fingerprint for attacker relays
/// before any grinding happens.
fn fingerprint_from_index(tag: u8, idx: u32) -> Fingerprint {
    let mut bytes = [0u8; 20];
    bytes[0] = tag;
    bytes[1..5].copy_from_slice(&idx.to_be_bytes());
    bytes[19] = 1;
    Fingerprint(bytes)
}

fn attacker_act(
    config: &SimConfig,
    state: &mut AttackerState,
    relays: &mut [RelayRuntime],
    t: u64,
    hour: u32,
    snapshots: &[ConsensusSnapshot],
    rng: &mut ChaCha8Rng,
) -> Result<(), SimError> {
    match state.spec.strategy {
        Strategy::Shadow => {
            if let Some(plan) = &state.plan {
                for rotation in &plan.rotations {
                    if state.takeover_start_hour + rotation.hour_offset == hour {
                        for &(ip_idx, relay_idx) in &rotation.deactivate {
                            let offset =
                                (ip_idx * state.spec.relays_per_ip + relay_idx) as usize;
                            if let Some(r) = relays.get_mut(state.relay_range.start + offset) {
                                r.running = false;
                            }
                        }
                    }
                }
            }
            Ok(())
        }
        Strategy::Grind | Strategy::GuardAndHsdir => {
            // Plant ground fingerprints in the last snapshot before each
            // period start; uptime is per identity so the HSDir flag
            // survives the switch once the warm-up has passed.
            if t < config.start_time + config.hsdir_uptime_requirement {
                return Ok(());
            }
            if state.next_period == 0 {
                state.next_period = time_period(t, &state.target) + 1;
            }
            let upload = period_start(&state.target, state.next_period);
            if upload >= t && upload < t + 3600 {
                let ring_size = snapshots
                    .last()
                    .map(|s| s.relays.iter().filter(|r| r.has_flag(Flag::HSDir)).count())
                    .unwrap_or(config.honest_relays as usize)
                    .max(1);
                let avg = ring_modulus() / BigUint::from(ring_size);
                let width = width_from_fraction(&avg, state.spec.grind_width);

                match state.spec.strategy {
                    Strategy::Grind => {
                        // one relay per replica, reground every period
                        for replica in 0..2u8 {
                            let desc = descriptor_id(&state.target, state.next_period, replica)
                                .expect("replica in range");
                            let idx = state.relay_range.start + replica as usize;
                            if let Some(relay) = relays.get_mut(idx) {
                                relay.fingerprint = plant_fingerprint(&desc, &width, rng);
                            }
                        }
                    }
                    Strategy::GuardAndHsdir => {
                        // capture all 3 slots of replica 0
                        let desc = descriptor_id(&state.target, state.next_period, 0)
                            .expect("replica in range");
                        let mut planted = BTreeSet::new();
                        while planted.len() < 3.min(state.relay_range.len()) {
                            planted.insert(plant_fingerprint(&desc, &width, rng));
                        }
                        for (i, fp) in planted.into_iter().enumerate() {
                            if let Some(relay) = relays.get_mut(state.relay_range.start + i) {
                                relay.fingerprint = fp;
                            }
                        }
                    }
                    Strategy::Shadow => unreachable!(),
                }
                state.next_period += 1;
            }
            Ok(())
        }
    }
}

fn width_from_fraction(avg: &BigUint, fraction: f64) -> BigUint {
    let scale = 1u64 << 32;
    let num = ((fraction * scale as f64).round() as u64).max(1);
    let width: BigUint = (avg * BigUint::from(num)) >> 32u32;
    width.max(BigUint::one())
}

struct ClientState {
    guards: Vec<(Fingerprint, u64)>, // (fingerprint, expires_at)
}

fn simulate_clients(
    config: &SimConfig,
    archive: &ConsensusArchive,
    truth: &GroundTruth,
    rng: &mut ChaCha8Rng,
) -> (Vec<RequestRecord>, Vec<DeanonEvent>) {
    let mut log = Vec::new();
    let mut deanon = Vec::new();
    if config.client_population == 0 || config.request_model.requests_per_client_hour <= 0.0 {
        return (log, deanon);
    }

    // desc_id -> responsible slots of its replica, for the hit test
    let mut responsible_by_desc: HashMap<DescriptorId, &[Fingerprint]> = HashMap::new();
    for service in &truth.services {
        for period in &service.periods {
            for replica in &period.replicas {
                responsible_by_desc.insert(replica.desc_id, &replica.responsible);
            }
        }
    }
    let attacker_fps_by_hour: HashMap<u64, BTreeSet<Fingerprint>> = truth
        .hourly_attacker_fingerprints
        .iter()
        .map(|h| (h.hour, h.fingerprints.iter().copied().collect()))
        .collect();
    let attacker_guards: BTreeSet<Fingerprint> =
        truth.attacker_guards.iter().copied().collect();
    let target_onion = config
        .attacker
        .as_ref()
        .and_then(|a| OnionAddress::parse(&a.target_onion).ok());

    let poisson = rand_distr::Poisson::new(config.request_model.requests_per_client_hour)
        .expect("validated rate");

    let mut clients: Vec<ClientState> = (0..config.client_population)
        .map(|_| ClientState { guards: Vec::new() })
        .collect();

    let services: Vec<(OnionAddress, u32)> = config
        .hidden_services
        .iter()
        .map(|s| (OnionAddress::parse(&s.onion).expect("validated"), s.publish_offset_hours))
        .collect();

    for snapshot in archive.snapshots() {
        let t = snapshot.valid_after;
        let hour_idx = ((t - config.start_time) / 3600) as u32;
        let guard_pool: Vec<Fingerprint> = snapshot
            .relays
            .iter()
            .filter(|r| r.has_flag(Flag::Guard))
            .map(|r| r.fingerprint)
            .collect();
        let present: BTreeSet<Fingerprint> =
            snapshot.relays.iter().map(|r| r.fingerprint).collect();

        let published: Vec<&(OnionAddress, u32)> =
            services.iter().filter(|(_, offset)| *offset <= hour_idx).collect();
        let zipf = if published.is_empty() {
            None
        } else {
            let weights: Vec<f64> = (0..published.len())
                .map(|i| 1.0 / ((i + 1) as f64).powf(config.request_model.zipf_exponent))
                .collect();
            Some(WeightedIndex::new(&weights).expect("positive weights"))
        };

        let attacker_now = attacker_fps_by_hour.get(&t);

        for (client_id, client) in clients.iter_mut().enumerate() {
            maintain_guards(client, &guard_pool, &present, t, rng);
            if client.guards.is_empty() {
                continue;
            }
            let n_requests = poisson.sample(rng) as u32;
            for _ in 0..n_requests {
                let guard = client.guards[rng.gen_range(0..client.guards.len())].0;
                let nonexistent = rng.gen_bool(config.request_model.nonexistent_fraction);
                let desc_id = if nonexistent || published.is_empty() {
                    DescriptorId(rng.gen())
                } else {
                    let (onion, _) = published[zipf.as_ref().expect("services").sample(rng)];
                    let replica = rng.gen_range(0..2u8);
                    descriptor_id(onion, time_period(t, onion), replica)
                        .expect("replica in range")
                };
                log.push(RequestRecord {
                    hour: t,
                    desc_id,
                    count: 1,
                    client_id: client_id as u32,
                    guard_fp: guard,
                });

                // deanonymisation check for requests hitting the target
                if let (Some(slots), Some(attacker_fps)) =
                    (responsible_by_desc.get(&desc_id), attacker_now)
                {
                    if slots.is_empty() {
                        continue;
                    }
                    let queried = slots[rng.gen_range(0..slots.len())];
                    let is_target = target_onion
                        .map(|onion| {
                            truth
                                .services
                                .iter()
                                .any(|s| s.onion == onion && service_has_desc(s, &desc_id))
                        })
                        .unwrap_or(false);
                    if is_target
                        && attacker_fps.contains(&queried)
                        && attacker_guards.contains(&guard)
                    {
                        deanon.push(DeanonEvent {
                            hour: t,
                            client_id: client_id as u32,
                            client_ip: format!(
                                "203.0.{}.{}",
                                client_id / 250,
                                client_id % 250
                            ),
                            region: format!("region-{}", client_id % 8),
                        });
                    }
                }
            }
        }
    }
    (log, deanon)
}

fn service_has_desc(service: &ServiceTruth, desc: &DescriptorId) -> bool {
    service
        .periods
        .iter()
        .any(|p| p.replicas.iter().any(|r| r.desc_id == *desc))
}

fn maintain_guards(
    client: &mut ClientState,
    pool: &[Fingerprint],
    present: &BTreeSet<Fingerprint>,
    t: u64,
    rng: &mut impl Rng,
) {
    client.guards.retain(|(_, expires)| t < *expires);
    let reachable = client.guards.iter().filter(|(fp, _)| present.contains(fp)).count();
    if reachable < 2 {
        client.guards.retain(|(fp, _)| present.contains(fp));
    }
    while client.guards.len() < 3 && !pool.is_empty() {
        let candidate = pool[rng.gen_range(0..pool.len())];
        if client.guards.iter().any(|(fp, _)| *fp == candidate) {
            if client.guards.len() >= pool.len().min(3) {
                break;
            }
            continue;
        }
        let lifetime = rng.gen_range(30 * 86_400..=60 * 86_400);
        client.guards.push((candidate, t + lifetime));
    }
}

/// Replays authority flag assignment over the recorded runtime trace and
/// checks the emitted archive against it, plus the snapshot legality rules.
pub fn verify_archive_against_trace(output: &SimOutput) -> Result<(), String> {
    let params = FlagParams::from(&output.config);
    if output.trace.len() != output.archive.snapshots().len() {
        return Err(format!(
            "trace has {} hours, archive {} snapshots",
            output.trace.len(),
            output.archive.snapshots().len()
        ));
    }
    for ((t, relays), snapshot) in output.trace.iter().zip(output.archive.snapshots()) {
        let replayed = assign_flags(relays, *t, &params);
        if &replayed != snapshot {
            return Err(format!("snapshot at {t} differs from flag-rule replay"));
        }
        snapshot.validate()?;
        // 25-hour rule directly against the runtime state
        for entry in &snapshot.relays {
            if entry.has_flag(Flag::HSDir) {
                let runtime = relays
                    .iter()
                    .find(|r| r.fingerprint == entry.fingerprint)
                    .ok_or_else(|| format!("snapshot fingerprint {} not in trace", entry.fingerprint))?;
                if t.saturating_sub(runtime.up_since) < params.hsdir_uptime {
                    return Err(format!(
                        "relay {} holds HSDir with uptime {}s at {t}",
                        entry.fingerprint,
                        t - runtime.up_since
                    ));
                }
            }
        }
    }
    Ok(())
}
