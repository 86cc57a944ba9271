//! Anonymous data collection with per-user rate limits enforced through
//! basename-linkable Direct Anonymous Attestation signatures.

pub mod client;
pub mod clock;
pub mod daa;
pub mod error;
pub mod fpe;
pub mod harness;
pub mod http;
pub mod issuer;
pub mod pairing;
pub mod persist;
pub mod rules;
pub mod transport;
pub mod verifier;
pub mod wire;
