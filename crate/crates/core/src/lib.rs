//! Offline toolkit for the Tor v2 hidden-service directory protocol:
//! ring math, synthetic consensus archives, attack simulation, descriptor
//! request resolution, and a five-rule tracking detector.

pub mod consensus;
pub mod detector;
pub mod hs_protocol;
pub mod popularity;
pub mod sim;

pub use consensus::{ConsensusArchive, ConsensusSnapshot, FingerprintChangeEvent, RelayEntry};
pub use hs_protocol::{DescriptorId, Fingerprint, HsDirRing, OnionAddress};
