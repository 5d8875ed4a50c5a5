//! Browser bindings: descriptor derivation, ring placement data for canvas
//! rendering, and guard-compromise probability curves. Everything returns
//! JSON strings so the page needs no generated TypeScript glue.

use chrono::NaiveDate;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use hsdirscope::hs_protocol::{
    descriptor_id, responsible_hsdirs, ring_modulus, time_period, DescriptorId,
    Fingerprint, HsDirRing, OnionAddress,
};
use hsdirscope::sim::guard_compromise_probability;

fn parse_onion(text: &str) -> Result<OnionAddress, String> {
    OnionAddress::parse(&text.trim().to_ascii_lowercase()).map_err(|e| e.to_string())
}

fn parse_date(text: &str) -> Result<u64, String> {
    let date = NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d")
        .map_err(|_| format!("invalid date {text:?}, expected YYYY-MM-DD"))?;
    Ok(date.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp() as u64)
}

#[derive(Serialize)]
struct DeriveResult {
    onion: String,
    period: u64,
    descriptor_ids: [String; 2],
}

fn derive_impl(onion: &str, date: &str) -> Result<String, String> {
    let onion = parse_onion(onion)?;
    let period = time_period(parse_date(date)?, &onion);
    let ids = [
        descriptor_id(&onion, period, 0).map_err(|e| e.to_string())?.to_base32(),
        descriptor_id(&onion, period, 1).map_err(|e| e.to_string())?.to_base32(),
    ];
    serde_json::to_string(&DeriveResult {
        onion: onion.text(),
        period,
        descriptor_ids: ids,
    })
    .map_err(|e| e.to_string())
}

/// Both replica descriptor IDs for an onion address on a UTC date.
#[wasm_bindgen]
pub fn derive_descriptor_ids(onion: &str, date: &str) -> Result<String, JsValue> {
    derive_impl(onion, date).map_err(JsValue::from)
}

#[derive(Serialize)]
struct RingNode {
    /// Position on the unit circle, fraction of the full 160-bit ring.
    angle: f64,
    fingerprint: String,
    responsible: bool,
    attacker: bool,
}

#[derive(Serialize)]
struct RingPlacement {
    descriptor_angle: [f64; 2],
    descriptor_ids: [String; 2],
    nodes: Vec<RingNode>,
}

fn angle_of(bytes: &[u8; 20]) -> f64 {
    // first 8 bytes give far more resolution than a canvas needs
    u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes")) as f64 / u64::MAX as f64
}

fn ring_impl(
    onion: &str,
    date: &str,
    ring_size: u32,
    attacker_count: u32,
    seed: u64,
) -> Result<String, String> {
    if !(3..=500).contains(&ring_size) {
        return Err("ring size must be between 3 and 500".to_string());
    }
    if attacker_count > ring_size {
        return Err("attacker count cannot exceed ring size".to_string());
    }
    let onion = parse_onion(onion)?;
    let period = time_period(parse_date(date)?, &onion);
    let descs: Vec<DescriptorId> = (0..2u8)
        .map(|r| descriptor_id(&onion, period, r).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let honest = ring_size - attacker_count;
    let mut fps: Vec<(Fingerprint, bool)> =
        (0..honest).map(|_| (Fingerprint(rng.gen()), false)).collect();
    // attacker fingerprints planted just after replica slots, round-robin
    let width = ring_modulus() / (u64::from(ring_size) * 1000u64);
    for i in 0..attacker_count {
        let target = descs[(i % 2) as usize];
        let offset = rand::distributions::Uniform::new_inclusive(1u64, 1000)
            .sample(&mut rng);
        let pos = (target.to_biguint() + width.clone() * offset) % ring_modulus();
        fps.push((Fingerprint::from_biguint(&pos), true));
    }

    let ring = HsDirRing::from_fingerprints(fps.iter().map(|(f, _)| *f).collect());
    let mut responsible = Vec::new();
    for desc in &descs {
        responsible.extend(responsible_hsdirs(desc, &ring).map_err(|e| e.to_string())?);
    }

    let mut nodes: Vec<RingNode> = fps
        .iter()
        .map(|(fp, attacker)| RingNode {
            angle: angle_of(&fp.0),
            fingerprint: fp.to_hex(),
            responsible: responsible.contains(fp),
            attacker: *attacker,
        })
        .collect();
    nodes.sort_by(|a, b| a.angle.total_cmp(&b.angle));

    serde_json::to_string(&RingPlacement {
        descriptor_angle: [angle_of(&descs[0].0), angle_of(&descs[1].0)],
        descriptor_ids: descs.iter().map(|d| d.to_base32()).collect::<Vec<_>>().try_into().unwrap(),
        nodes,
    })
    .map_err(|e| e.to_string())
}

/// Synthetic ring placement: `ring_size` HSDirs, `attacker_count` of them
/// ground to sit just after the two replica descriptor IDs. Returns node
/// angles and responsibility for canvas rendering.
#[wasm_bindgen]
pub fn ring_placement(
    onion: &str,
    date: &str,
    ring_size: u32,
    attacker_count: u32,
    seed: u64,
) -> Result<String, JsValue> {
    ring_impl(onion, date, ring_size, attacker_count, seed).map_err(JsValue::from)
}

#[derive(Serialize)]
struct CurvePoint {
    attacker_guards: u64,
    probability: f64,
}

fn guard_curve_impl(total_guards: u64, max_attacker: u64) -> Result<String, String> {
    if total_guards == 0 || total_guards > 1_000_000 {
        return Err("total guards must be between 1 and 10^6".to_string());
    }
    let cap = max_attacker.min(total_guards);
    let points: Vec<CurvePoint> = (0..=cap)
        .map(|a| {
            guard_compromise_probability(total_guards, a, 3.min(total_guards))
                .map(|probability| CurvePoint { attacker_guards: a, probability })
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

/// P(at least one of a client's 3 guards is the attacker's) for
/// 0..=max_attacker attacker guards out of total_guards.
#[wasm_bindgen]
pub fn guard_curve(total_guards: u64, max_attacker: u64) -> Result<String, JsValue> {
    guard_curve_impl(total_guards, max_attacker).map_err(JsValue::from)
}
