//! Fixed-size padded bodies exchanged between clients, issuer, and verifier.
//!
//! Every body is `[u32 BE payload length][payload][fill]` and has the exact
//! size for its endpoint, so request and response sizes carry no
//! information. Payloads are JSON envelopes with binary fields in standard
//! base64.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::daa::{Credential, DaaSignature, GroupPublicKey, JoinRequest};
use crate::error::DecodeError;

pub const GROUP_KEYS_RESPONSE_LEN: usize = 5160;
pub const JOIN_REQUEST_BODY_LEN: usize = 973;
pub const JOIN_RESPONSE_BODY_LEN: usize = 489;
pub const COLLECT_REQUEST_LEN: usize = 16384;
pub const COLLECT_ACK_LEN: usize = 32;
pub const ADMIN_BODY_LEN: usize = 1024;

const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("payload of {payload} bytes does not fit a {body}-byte body")]
    TooLarge { payload: usize, body: usize },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Pads `payload` to exactly `size` bytes with fill drawn from `rng`.
pub fn pad<R: RngCore>(payload: &[u8], size: usize, rng: &mut R) -> Result<Vec<u8>, WireError> {
    if payload.len() + HEADER_LEN > size {
        return Err(WireError::TooLarge { payload: payload.len(), body: size });
    }
    let mut out = vec![0u8; size];
    out[..HEADER_LEN].copy_from_slice(&(payload.len() as u32).to_be_bytes());
    out[HEADER_LEN..HEADER_LEN + payload.len()].copy_from_slice(payload);
    rng.fill_bytes(&mut out[HEADER_LEN + payload.len()..]);
    Ok(out)
}

/// Pads with fill derived from the payload itself, so equal payloads give
/// byte-identical bodies.
pub fn pad_deterministic(payload: &[u8], size: usize) -> Result<Vec<u8>, WireError> {
    let seed: [u8; 32] = Sha256::digest(payload).into();
    pad(payload, size, &mut ChaCha20Rng::from_seed(seed))
}

pub fn unpad(body: &[u8], size: usize) -> Result<&[u8], DecodeError> {
    if body.len() != size {
        return Err(DecodeError::Length { expected: size, got: body.len() });
    }
    let len = u32::from_be_bytes(body[..HEADER_LEN].try_into().unwrap()) as usize;
    if len > size - HEADER_LEN {
        return Err(DecodeError::Frame(format!("declared length {len} exceeds body")));
    }
    Ok(&body[HEADER_LEN..HEADER_LEN + len])
}

fn from_json<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Result<T, DecodeError> {
    serde_json::from_slice(bytes).map_err(|e| DecodeError::Frame(e.to_string()))
}

fn b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

fn unb64(s: &str) -> Result<Vec<u8>, DecodeError> {
    B64.decode(s).map_err(|e| DecodeError::Frame(e.to_string()))
}

/// One announced group key and its expiry (seconds since the Unix epoch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKeyEpoch {
    pub epoch_id: u64,
    pub expiry: u64,
    pub gpk: GroupPublicKey,
}

#[derive(Serialize, Deserialize)]
struct EpochJson {
    epoch_id: u64,
    expiry: u64,
    gpk: String,
}

#[derive(Serialize, Deserialize)]
struct GroupKeysJson {
    epochs: Vec<EpochJson>,
}

pub fn encode_group_keys(epochs: &[GroupKeyEpoch]) -> Result<Vec<u8>, WireError> {
    let doc = GroupKeysJson {
        epochs: epochs
            .iter()
            .map(|e| EpochJson { epoch_id: e.epoch_id, expiry: e.expiry, gpk: b64(&e.gpk.to_bytes()) })
            .collect(),
    };
    pad_deterministic(&serde_json::to_vec(&doc).unwrap(), GROUP_KEYS_RESPONSE_LEN)
}

pub fn decode_group_keys(body: &[u8]) -> Result<Vec<GroupKeyEpoch>, DecodeError> {
    let doc: GroupKeysJson = from_json(unpad(body, GROUP_KEYS_RESPONSE_LEN)?)?;
    doc.epochs
        .into_iter()
        .map(|e| {
            Ok(GroupKeyEpoch {
                epoch_id: e.epoch_id,
                expiry: e.expiry,
                gpk: GroupPublicKey::from_bytes(&unb64(&e.gpk)?)?,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct JoinRequestJson {
    epoch_id: u64,
    request: String,
}

pub fn encode_join_request<R: RngCore>(epoch_id: u64, req: &JoinRequest, rng: &mut R) -> Result<Vec<u8>, WireError> {
    let doc = JoinRequestJson { epoch_id, request: b64(&req.to_bytes()) };
    pad(&serde_json::to_vec(&doc).unwrap(), JOIN_REQUEST_BODY_LEN, rng)
}

pub fn decode_join_request(body: &[u8]) -> Result<(u64, JoinRequest), DecodeError> {
    let doc: JoinRequestJson = from_json(unpad(body, JOIN_REQUEST_BODY_LEN)?)?;
    Ok((doc.epoch_id, JoinRequest::from_bytes(&unb64(&doc.request)?)?))
}

/// Issuer's answer to a join.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum JoinResponse {
    Credential(Credential),
    /// Identity not on the allow-list (HTTP 403 equivalent).
    Unregistered,
    /// Proof or identity signature invalid (HTTP 400 equivalent).
    BadProof,
    /// Requested epoch is not currently announced.
    UnknownEpoch,
    Malformed,
}

impl JoinResponse {
    pub fn http_status(&self) -> u16 {
        match self {
            JoinResponse::Credential(_) => 200,
            JoinResponse::Unregistered => 403,
            JoinResponse::UnknownEpoch => 404,
            JoinResponse::BadProof | JoinResponse::Malformed => 400,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JoinResponseJson {
    status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    credential: Option<String>,
}

pub fn encode_join_response<R: RngCore>(resp: &JoinResponse, rng: &mut R) -> Result<Vec<u8>, WireError> {
    let (status, credential) = match resp {
        JoinResponse::Credential(c) => ("ok", Some(b64(&c.to_bytes()))),
        JoinResponse::Unregistered => ("unregistered", None),
        JoinResponse::BadProof => ("bad-proof", None),
        JoinResponse::UnknownEpoch => ("unknown-epoch", None),
        JoinResponse::Malformed => ("malformed", None),
    };
    let doc = JoinResponseJson { status: status.into(), credential };
    pad(&serde_json::to_vec(&doc).unwrap(), JOIN_RESPONSE_BODY_LEN, rng)
}

pub fn decode_join_response(body: &[u8]) -> Result<JoinResponse, DecodeError> {
    let doc: JoinResponseJson = from_json(unpad(body, JOIN_RESPONSE_BODY_LEN)?)?;
    Ok(match (doc.status.as_str(), doc.credential) {
        ("ok", Some(c)) => JoinResponse::Credential(Credential::from_bytes(&unb64(&c)?)?),
        ("unregistered", _) => JoinResponse::Unregistered,
        ("bad-proof", _) => JoinResponse::BadProof,
        ("unknown-epoch", _) => JoinResponse::UnknownEpoch,
        ("malformed", _) => JoinResponse::Malformed,
        (other, _) => return Err(DecodeError::Frame(format!("unknown join status {other:?}"))),
    })
}

/// `(m, σ_1..σ_n, bsn_1..bsn_n)` as submitted to the verifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmitRequest {
    pub ruleset_version: String,
    pub message: Vec<u8>,
    pub basenames: Vec<String>,
    pub signatures: Vec<DaaSignature>,
}

#[derive(Serialize, Deserialize)]
struct SubmitJson {
    ruleset_version: String,
    message: String,
    basenames: Vec<String>,
    signatures: Vec<String>,
}

impl SubmitRequest {
    pub fn encode<R: RngCore>(&self, rng: &mut R) -> Result<Vec<u8>, WireError> {
        let doc = SubmitJson {
            ruleset_version: self.ruleset_version.clone(),
            message: b64(&self.message),
            basenames: self.basenames.clone(),
            signatures: self.signatures.iter().map(|s| b64(&s.to_bytes())).collect(),
        };
        pad(&serde_json::to_vec(&doc).unwrap(), COLLECT_REQUEST_LEN, rng)
    }

    pub fn decode(body: &[u8]) -> Result<Self, DecodeError> {
        let doc: SubmitJson = from_json(unpad(body, COLLECT_REQUEST_LEN)?)?;
        Ok(Self {
            ruleset_version: doc.ruleset_version,
            message: unb64(&doc.message)?,
            basenames: doc.basenames,
            signatures: doc
                .signatures
                .iter()
                .map(|s| DaaSignature::from_bytes(&unb64(s)?))
                .collect::<Result<_, _>>()?,
        })
    }
}

/// Single-byte verdict carried in the collect acknowledgement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AckCode {
    Accepted = 0,
    BadBasename = 1,
    BadSignature = 2,
    RateLimited = 3,
    Malformed = 4,
    Unavailable = 5,
}

impl AckCode {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => AckCode::Accepted,
            1 => AckCode::BadBasename,
            2 => AckCode::BadSignature,
            3 => AckCode::RateLimited,
            4 => AckCode::Malformed,
            5 => AckCode::Unavailable,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AckCode::Accepted => "accepted",
            AckCode::BadBasename => "bad-basename",
            AckCode::BadSignature => "bad-signature",
            AckCode::RateLimited => "rate-limited",
            AckCode::Malformed => "malformed",
            AckCode::Unavailable => "unavailable",
        }
    }
}

pub fn encode_ack<R: RngCore>(code: AckCode, rng: &mut R) -> Vec<u8> {
    pad(&[code as u8], COLLECT_ACK_LEN, rng).expect("one byte fits")
}

pub fn decode_ack(body: &[u8]) -> Result<AckCode, DecodeError> {
    match unpad(body, COLLECT_ACK_LEN)? {
        [b] => AckCode::from_u8(*b).ok_or_else(|| DecodeError::Frame(format!("unknown ack code {b}"))),
        other => Err(DecodeError::Frame(format!("ack payload of {} bytes", other.len()))),
    }
}

/// Issuer → verifier notice that a new group key is current, signed with
/// the issuer's admin Ed25519 key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RotationNotice {
    pub epoch: GroupKeyEpoch,
    pub signature: [u8; 64],
}

#[derive(Serialize, Deserialize)]
struct NoticeJson {
    epoch_id: u64,
    expiry: u64,
    gpk: String,
    signature: String,
}

impl RotationNotice {
    pub fn signed_bytes(epoch: &GroupKeyEpoch) -> Vec<u8> {
        let mut t = crate::pairing::Transcript::new();
        t.append(b"ANONLIMIT-rotate-v1")
            .append(&epoch.epoch_id.to_be_bytes())
            .append(&epoch.expiry.to_be_bytes())
            .append(&epoch.gpk.to_bytes());
        t.into_bytes()
    }

    pub fn encode<R: RngCore>(&self, rng: &mut R) -> Result<Vec<u8>, WireError> {
        let doc = NoticeJson {
            epoch_id: self.epoch.epoch_id,
            expiry: self.epoch.expiry,
            gpk: b64(&self.epoch.gpk.to_bytes()),
            signature: b64(&self.signature),
        };
        pad(&serde_json::to_vec(&doc).unwrap(), ADMIN_BODY_LEN, rng)
    }

    pub fn decode(body: &[u8]) -> Result<Self, DecodeError> {
        let doc: NoticeJson = from_json(unpad(body, ADMIN_BODY_LEN)?)?;
        let sig = unb64(&doc.signature)?;
        Ok(Self {
            epoch: GroupKeyEpoch {
                epoch_id: doc.epoch_id,
                expiry: doc.expiry,
                gpk: GroupPublicKey::from_bytes(&unb64(&doc.gpk)?)?,
            },
            signature: sig.try_into().map_err(|_| DecodeError::Frame("notice signature must be 64 bytes".into()))?,
        })
    }
}
