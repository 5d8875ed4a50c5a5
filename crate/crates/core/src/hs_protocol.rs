//! v2 hidden-service identifier math: onion addresses, descriptor IDs, and
//! responsible-HSDir lookups on the 160-bit fingerprint ring.
//!
//! All ring arithmetic is done on arbitrary-precision nonnegative integers;
//! 2^160 does not fit any fixed width and the detector's ratio thresholds
//! must be exact.

use std::fmt;

use num_bigint::BigUint;
use num_traits::One;
use sha1::{Digest, Sha1};
use thiserror::Error;

const BASE32_ALPHABET: base32::Alphabet = base32::Alphabet::Rfc4648Lower { padding: false };

/// Seconds per time period (descriptor IDs rotate daily).
pub const PERIOD_SECONDS: u64 = 86_400;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("empty public key input")]
    EmptyInput,
    #[error("replica must be 0 or 1, got {0}")]
    ReplicaOutOfRange(u8),
    #[error("ring holds {0} fingerprints, need at least 3")]
    InsufficientRing(usize),
    #[error("ring is empty")]
    EmptyRing,
    #[error("invalid onion address text {0:?}")]
    BadOnionText(String),
    #[error("invalid descriptor id text {0:?}")]
    BadDescriptorText(String),
    #[error("invalid fingerprint hex {0:?}")]
    BadFingerprintHex(String),
}

/// 160-bit relay identity digest, ordered as a big-endian unsigned integer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fingerprint(pub [u8; 20]);

impl Fingerprint {
    pub fn from_hex(s: &str) -> Result<Self, ProtocolError> {
        let bytes: [u8; 20] = hex::decode(s)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| ProtocolError::BadFingerprintHex(s.to_string()))?;
        Ok(Fingerprint(bytes))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn to_biguint(&self) -> BigUint {
        BigUint::from_bytes_be(&self.0)
    }

    /// Truncates mod 2^160.
    pub fn from_biguint(v: &BigUint) -> Self {
        let bytes = v.to_bytes_be();
        let mut out = [0u8; 20];
        let n = bytes.len().min(20);
        out[20 - n..].copy_from_slice(&bytes[bytes.len() - n..]);
        Fingerprint(out)
    }
}

impl serde::Serialize for Fingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for Fingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Fingerprint::from_hex(&text).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.to_hex())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// 160-bit descriptor identifier, base32 text form is 32 chars.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DescriptorId(pub [u8; 20]);

impl DescriptorId {
    pub fn to_base32(&self) -> String {
        base32::encode(BASE32_ALPHABET, &self.0)
    }

    pub fn from_base32(s: &str) -> Result<Self, ProtocolError> {
        if s.len() != 32 {
            return Err(ProtocolError::BadDescriptorText(s.to_string()));
        }
        let bytes: [u8; 20] = base32::decode(BASE32_ALPHABET, s)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| ProtocolError::BadDescriptorText(s.to_string()))?;
        Ok(DescriptorId(bytes))
    }

    pub fn to_biguint(&self) -> BigUint {
        BigUint::from_bytes_be(&self.0)
    }

    pub fn from_biguint(v: &BigUint) -> Self {
        DescriptorId(Fingerprint::from_biguint(v).0)
    }
}

impl serde::Serialize for DescriptorId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base32())
    }
}

impl<'de> serde::Deserialize<'de> for DescriptorId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        DescriptorId::from_base32(&text).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for DescriptorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DescriptorId({})", self.to_base32())
    }
}

impl fmt::Display for DescriptorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_base32())
    }
}

/// 80-bit hidden-service identifier; base32 text form is the 16-char onion
/// address (without the ".onion" suffix).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct OnionAddress(pub [u8; 10]);

impl OnionAddress {
    pub fn text(&self) -> String {
        base32::encode(BASE32_ALPHABET, &self.0)
    }

    pub fn parse(s: &str) -> Result<Self, ProtocolError> {
        let s = s.strip_suffix(".onion").unwrap_or(s);
        if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_lowercase() || (b'2'..=b'7').contains(&b)) {
            return Err(ProtocolError::BadOnionText(s.to_string()));
        }
        let bytes: [u8; 10] = base32::decode(BASE32_ALPHABET, s)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| ProtocolError::BadOnionText(s.to_string()))?;
        Ok(OnionAddress(bytes))
    }
}

impl serde::Serialize for OnionAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text())
    }
}

impl<'de> serde::Deserialize<'de> for OnionAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        OnionAddress::parse(&text).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for OnionAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OnionAddress({})", self.text())
    }
}

impl fmt::Display for OnionAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Derives the onion address from a DER-encoded public key (treated as an
/// opaque byte string): base32 of the first 10 bytes of its SHA-1 digest.
pub fn onion_address_from_pubkey(pubkey_der: &[u8]) -> Result<OnionAddress, ProtocolError> {
    if pubkey_der.is_empty() {
        return Err(ProtocolError::EmptyInput);
    }
    let digest = Sha1::digest(pubkey_der);
    let mut id = [0u8; 10];
    id.copy_from_slice(&digest[..10]);
    Ok(OnionAddress(id))
}

/// Day-granularity time period for a service at `now`. The period boundary
/// is perturbed by the first identity byte so services do not all rotate at
/// midnight.
pub fn time_period(now: u64, service_id: &OnionAddress) -> u64 {
    let offset = u64::from(service_id.0[0]) * PERIOD_SECONDS / 256;
    (now + offset) / PERIOD_SECONDS
}

/// First unix second of `period` for this service (inverse of `time_period`).
pub fn period_start(service_id: &OnionAddress, period: u64) -> u64 {
    let offset = u64::from(service_id.0[0]) * PERIOD_SECONDS / 256;
    (period * PERIOD_SECONDS).saturating_sub(offset)
}

/// Descriptor ID for a service, period, and replica:
/// SHA-1(service_id || SHA-1(period_be32 || replica)).
pub fn descriptor_id(
    service_id: &OnionAddress,
    period: u64,
    replica: u8,
) -> Result<DescriptorId, ProtocolError> {
    if replica > 1 {
        return Err(ProtocolError::ReplicaOutOfRange(replica));
    }
    let mut secret_input = Vec::with_capacity(5);
    secret_input.extend_from_slice(&(period as u32).to_be_bytes());
    secret_input.push(replica);
    let secret = Sha1::digest(&secret_input);
    let mut outer = Vec::with_capacity(30);
    outer.extend_from_slice(&service_id.0);
    outer.extend_from_slice(&secret);
    let digest = Sha1::digest(&outer);
    let mut out = [0u8; 20];
    out.copy_from_slice(&digest);
    Ok(DescriptorId(out))
}

/// Sorted set of HSDir fingerprints forming the circular keyspace.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct HsDirRing {
    fingerprints: Vec<Fingerprint>,
}

impl HsDirRing {
    /// Sorts and deduplicates.
    pub fn from_fingerprints(mut fps: Vec<Fingerprint>) -> Self {
        fps.sort_unstable();
        fps.dedup();
        HsDirRing { fingerprints: fps }
    }

    pub fn fingerprints(&self) -> &[Fingerprint] {
        &self.fingerprints
    }

    pub fn len(&self) -> usize {
        self.fingerprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fingerprints.is_empty()
    }

    pub fn contains(&self, fp: &Fingerprint) -> bool {
        self.fingerprints.binary_search(fp).is_ok()
    }
}

/// The 3 ring fingerprints strictly greater than `desc_id`, wrapping past
/// 2^160-1. A fingerprint exactly equal to the descriptor ID does not count
/// as following it.
pub fn responsible_hsdirs(
    desc_id: &DescriptorId,
    ring: &HsDirRing,
) -> Result<[Fingerprint; 3], ProtocolError> {
    let fps = ring.fingerprints();
    if fps.len() < 3 {
        return Err(ProtocolError::InsufficientRing(fps.len()));
    }
    // First fingerprint strictly greater than desc_id (byte order == integer
    // order for 20-byte big-endian values).
    let start = fps.partition_point(|fp| fp.0 <= desc_id.0);
    let mut out = [fps[0]; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = fps[(start + i) % fps.len()];
    }
    Ok(out)
}

/// Clockwise distance from `desc_id` to `fp`: (fp - desc_id) mod 2^160.
pub fn ring_distance(desc_id: &DescriptorId, fp: &Fingerprint) -> BigUint {
    let d = desc_id.to_biguint();
    let f = fp.to_biguint();
    if f >= d {
        f - d
    } else {
        ring_modulus() + f - d
    }
}

/// 2^160.
pub fn ring_modulus() -> BigUint {
    BigUint::one() << 160
}

/// Average gap between consecutive ring fingerprints. The gaps (including
/// the wraparound gap) always sum to exactly 2^160, so this is
/// floor(2^160 / size).
pub fn avg_consecutive_distance(ring: &HsDirRing) -> Result<BigUint, ProtocolError> {
    if ring.is_empty() {
        return Err(ProtocolError::EmptyRing);
    }
    Ok(ring_modulus() / BigUint::from(ring.len()))
}
