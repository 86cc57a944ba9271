//! Direct Anonymous Attestation over a CL-signature credential: issuer setup,
//! the two-message join, basename-linkable signing, verification, and linking.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use bls12_381::{multi_miller_loop, G2Prepared};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use ff::Field;
use group::{Curve, Group};
use rand::rngs::OsRng;
use rand_core::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::DecodeError;
use crate::pairing::{
    g1_from_bytes, g2_from_bytes, hash_to_g1, random_nonzero_scalar, spk_dlog_prove, spk_dlog_verify, spk_dlogeq_prove,
    spk_dlogeq_verify, G1Affine, G1Projective, G2Affine, G2Projective, Scalar, SpkDlogEqProof, SpkDlogProof,
    SystemParams, Transcript, G1_LEN, G2_LEN, PROOF_LEN,
};

const SETUP_MSG: &[u8] = b"ANONLIMIT-setup-v1";
const JOIN_SIG_DST: &[u8] = b"ANONLIMIT-join-v1";
const CRED_MSG_DST: &[u8] = b"ANONLIMIT-cred-v1";
const SIGN_MSG_DST: &[u8] = b"ANONLIMIT-sign-v1";

pub const GPK_LEN: usize = 2 * G2_LEN + 2 * PROOF_LEN;
pub const UPK_LEN: usize = 32;
pub const JOIN_REQUEST_LEN: usize = UPK_LEN + G1_LEN + PROOF_LEN + 64;
pub const CREDENTIAL_LEN: usize = 4 * G1_LEN + PROOF_LEN;
pub const SIGNATURE_LEN: usize = 5 * G1_LEN + PROOF_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JoinError {
    #[error("user is not registered")]
    Unregistered,
    #[error("join proof or identity signature is invalid")]
    BadProof,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("credential failed verification")]
pub struct BadCredential;

/// Issuer secret key (x, y). Overwritten on drop.
pub struct IssuerSecretKey {
    x: Scalar,
    y: Scalar,
}

impl IssuerSecretKey {
    pub fn from_scalars(x: Scalar, y: Scalar) -> Self {
        Self { x, y }
    }

    pub fn x(&self) -> &Scalar {
        &self.x
    }

    pub fn y(&self) -> &Scalar {
        &self.y
    }

    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&crate::pairing::scalar_to_bytes(&self.x));
        out[32..].copy_from_slice(&crate::pairing::scalar_to_bytes(&self.y));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() != 64 {
            return Err(DecodeError::Length { expected: 64, got: bytes.len() });
        }
        Ok(Self {
            x: crate::pairing::scalar_from_bytes(&bytes[..32])?,
            y: crate::pairing::scalar_from_bytes(&bytes[32..])?,
        })
    }
}

impl Drop for IssuerSecretKey {
    fn drop(&mut self) {
        // SAFETY: both pointers come from live &mut fields.
        unsafe {
            std::ptr::write_volatile(&mut self.x, Scalar::zero());
            std::ptr::write_volatile(&mut self.y, Scalar::zero());
        }
    }
}

impl fmt::Debug for IssuerSecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("IssuerSecretKey(..)")
    }
}

/// Group public key (X, Y, π) with π split into one proof per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupPublicKey {
    pub x: G2Affine,
    pub y: G2Affine,
    pub proof_x: SpkDlogProof,
    pub proof_y: SpkDlogProof,
}

impl GroupPublicKey {
    pub fn verify_proofs(&self) -> bool {
        let g2 = SystemParams::g2();
        spk_dlog_verify(&G2Projective::from(self.x), &g2, &self.proof_x, SETUP_MSG)
            && spk_dlog_verify(&G2Projective::from(self.y), &g2, &self.proof_y, SETUP_MSG)
    }

    pub fn to_bytes(&self) -> [u8; GPK_LEN] {
        let mut out = [0u8; GPK_LEN];
        out[..G2_LEN].copy_from_slice(&self.x.to_compressed());
        out[G2_LEN..2 * G2_LEN].copy_from_slice(&self.y.to_compressed());
        out[2 * G2_LEN..2 * G2_LEN + PROOF_LEN].copy_from_slice(&self.proof_x.to_bytes());
        out[2 * G2_LEN + PROOF_LEN..].copy_from_slice(&self.proof_y.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() != GPK_LEN {
            return Err(DecodeError::Length { expected: GPK_LEN, got: bytes.len() });
        }
        Ok(Self {
            x: g2_from_bytes(&bytes[..G2_LEN])?,
            y: g2_from_bytes(&bytes[G2_LEN..2 * G2_LEN])?,
            proof_x: SpkDlogProof::from_bytes(&bytes[2 * G2_LEN..2 * G2_LEN + PROOF_LEN])?,
            proof_y: SpkDlogProof::from_bytes(&bytes[2 * G2_LEN + PROOF_LEN..])?,
        })
    }

    /// Hex SHA-256 of the serialized key.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Precomputes the pairing inputs for repeated verification.
    pub fn prepare(&self) -> PreparedGroupKey {
        PreparedGroupKey {
            gpk: *self,
            x: G2Prepared::from(self.x),
            y: G2Prepared::from(self.y),
            g2: G2_PREPARED.get_or_init(|| G2Prepared::from(G2Affine::generator())),
        }
    }
}

static G2_PREPARED: OnceLock<G2Prepared> = OnceLock::new();

/// A group public key with its G2 points in Miller-loop form.
#[derive(Clone)]
pub struct PreparedGroupKey {
    gpk: GroupPublicKey,
    x: G2Prepared,
    y: G2Prepared,
    g2: &'static G2Prepared,
}

impl PreparedGroupKey {
    pub fn group_key(&self) -> &GroupPublicKey {
        &self.gpk
    }
}

impl fmt::Debug for PreparedGroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("PreparedGroupKey").field(&self.gpk.fingerprint()).finish()
    }
}

/// Long-lived user identity: an Ed25519 keypair whose public half registers
/// the user with the issuer.
#[derive(Clone)]
pub struct UserIdentity {
    signing: SigningKey,
}

impl UserIdentity {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self { signing: SigningKey::generate(rng) }
    }

    pub fn from_secret_bytes(bytes: &[u8; 32]) -> Self {
        Self { signing: SigningKey::from_bytes(bytes) }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public_key(&self) -> [u8; UPK_LEN] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.signing.sign(msg).to_bytes()
    }
}

impl fmt::Debug for UserIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UserIdentity({})", hex::encode(self.public_key()))
    }
}

pub fn verify_identity_signature(u_pk: &[u8; UPK_LEN], msg: &[u8], sig: &[u8; 64]) -> bool {
    match VerifyingKey::from_bytes(u_pk) {
        Ok(vk) => vk.verify(msg, &Signature::from_bytes(sig)).is_ok(),
        Err(_) => false,
    }
}

/// The user's DAA secret gsk. Never leaves the client.
#[derive(Clone, PartialEq, Eq)]
pub struct UserDaaKey {
    pub(crate) gsk: Scalar,
}

impl UserDaaKey {
    pub fn to_bytes(&self) -> [u8; 32] {
        crate::pairing::scalar_to_bytes(&self.gsk)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let gsk = crate::pairing::scalar_from_bytes(bytes)?;
        if bool::from(gsk.is_zero()) {
            return Err(DecodeError::Scalar);
        }
        Ok(Self { gsk })
    }
}

impl fmt::Debug for UserDaaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("UserDaaKey(..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinRequest {
    pub u_pk: [u8; UPK_LEN],
    pub q: G1Affine,
    pub pi1: SpkDlogProof,
    pub sig_msg: [u8; 64],
}

impl JoinRequest {
    fn signed_bytes(u_pk: &[u8; UPK_LEN], q: &G1Affine, pi1: &SpkDlogProof) -> Vec<u8> {
        let mut t = Transcript::new();
        t.append(JOIN_SIG_DST).append(u_pk).append(&q.to_compressed()).append(&pi1.to_bytes());
        t.into_bytes()
    }

    pub fn to_bytes(&self) -> [u8; JOIN_REQUEST_LEN] {
        let mut out = [0u8; JOIN_REQUEST_LEN];
        let mut at = 0;
        for part in [&self.u_pk[..], &self.q.to_compressed()[..], &self.pi1.to_bytes()[..], &self.sig_msg[..]] {
            out[at..at + part.len()].copy_from_slice(part);
            at += part.len();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() != JOIN_REQUEST_LEN {
            return Err(DecodeError::Length { expected: JOIN_REQUEST_LEN, got: bytes.len() });
        }
        let (u_pk, rest) = bytes.split_at(UPK_LEN);
        let (q, rest) = rest.split_at(G1_LEN);
        let (pi1, sig) = rest.split_at(PROOF_LEN);
        Ok(Self {
            u_pk: u_pk.try_into().unwrap(),
            q: g1_from_bytes(q)?,
            pi1: SpkDlogProof::from_bytes(pi1)?,
            sig_msg: sig.try_into().unwrap(),
        })
    }
}

/// CL credential (a, b, c, d) with the issuer's proof that b and d share
/// an exponent over (g1, Q).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Credential {
    pub a: G1Affine,
    pub b: G1Affine,
    pub c: G1Affine,
    pub d: G1Affine,
    pub pi2: SpkDlogEqProof,
}

impl Credential {
    fn proof_msg(a: &G1Affine, c: &G1Affine) -> Vec<u8> {
        let mut t = Transcript::new();
        t.append(CRED_MSG_DST).append(&a.to_compressed()).append(&c.to_compressed());
        t.into_bytes()
    }

    pub fn to_bytes(&self) -> [u8; CREDENTIAL_LEN] {
        let mut out = [0u8; CREDENTIAL_LEN];
        for (i, p) in [self.a, self.b, self.c, self.d].iter().enumerate() {
            out[i * G1_LEN..(i + 1) * G1_LEN].copy_from_slice(&p.to_compressed());
        }
        out[4 * G1_LEN..].copy_from_slice(&self.pi2.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() != CREDENTIAL_LEN {
            return Err(DecodeError::Length { expected: CREDENTIAL_LEN, got: bytes.len() });
        }
        let p = |i: usize| g1_from_bytes(&bytes[i * G1_LEN..(i + 1) * G1_LEN]);
        Ok(Self { a: p(0)?, b: p(1)?, c: p(2)?, d: p(3)?, pi2: SpkDlogEqProof::from_bytes(&bytes[4 * G1_LEN..])? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DaaSignature {
    pub a: G1Affine,
    pub b: G1Affine,
    pub c: G1Affine,
    pub d: G1Affine,
    pub pi: SpkDlogEqProof,
    pub tag: G1Affine,
}

impl DaaSignature {
    pub fn to_bytes(&self) -> [u8; SIGNATURE_LEN] {
        let mut out = [0u8; SIGNATURE_LEN];
        for (i, p) in [self.a, self.b, self.c, self.d].iter().enumerate() {
            out[i * G1_LEN..(i + 1) * G1_LEN].copy_from_slice(&p.to_compressed());
        }
        out[4 * G1_LEN..4 * G1_LEN + PROOF_LEN].copy_from_slice(&self.pi.to_bytes());
        out[4 * G1_LEN + PROOF_LEN..].copy_from_slice(&self.tag.to_compressed());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() != SIGNATURE_LEN {
            return Err(DecodeError::Length { expected: SIGNATURE_LEN, got: bytes.len() });
        }
        let p = |i: usize| g1_from_bytes(&bytes[i * G1_LEN..(i + 1) * G1_LEN]);
        Ok(Self {
            a: p(0)?,
            b: p(1)?,
            c: p(2)?,
            d: p(3)?,
            pi: SpkDlogEqProof::from_bytes(&bytes[4 * G1_LEN..4 * G1_LEN + PROOF_LEN])?,
            tag: g1_from_bytes(&bytes[4 * G1_LEN + PROOF_LEN..])?,
        })
    }
}

macro_rules! hex_serde {
    ($ty:ty) => {
        impl serde::Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.to_bytes()))
            }
        }

        impl<'de> serde::Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = <String as serde::Deserialize>::deserialize(d)?;
                let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
                Self::from_bytes(&bytes).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_serde!(GroupPublicKey);
hex_serde!(UserDaaKey);
hex_serde!(Credential);
hex_serde!(IssuerSecretKey);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkResult {
    Linked,
    Unlinked,
    Invalid,
}

/// Authorized identities allowed to join.
pub trait UserRegistry {
    fn is_registered(&self, u_pk: &[u8; UPK_LEN]) -> bool;
}

impl UserRegistry for HashSet<[u8; UPK_LEN]> {
    fn is_registered(&self, u_pk: &[u8; UPK_LEN]) -> bool {
        self.contains(u_pk)
    }
}

/// Credentials handed out under one group key, keyed by user public key.
/// Issuance for a given user is serialized; distinct users proceed in parallel.
type Slot = Arc<Mutex<Option<Credential>>>;

#[derive(Debug, Default)]
pub struct IssuedCredentials {
    slots: Mutex<HashMap<[u8; UPK_LEN], Slot>>,
}

impl IssuedCredentials {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&self, u_pk: &[u8; UPK_LEN]) -> Slot {
        self.slots.lock().unwrap().entry(*u_pk).or_default().clone()
    }

    pub fn get(&self, u_pk: &[u8; UPK_LEN]) -> Option<Credential> {
        let slot = self.slots.lock().unwrap().get(u_pk).cloned()?;
        let cred = *slot.lock().unwrap();
        cred
    }

    pub fn insert(&self, u_pk: [u8; UPK_LEN], cred: Credential) {
        *self.slot(&u_pk).lock().unwrap() = Some(cred);
    }

    pub fn len(&self) -> usize {
        self.slots.lock().unwrap().values().filter(|s| s.lock().unwrap().is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Vec<([u8; UPK_LEN], Credential)> {
        self.slots.lock().unwrap().iter().filter_map(|(k, s)| s.lock().unwrap().map(|c| (*k, c))).collect()
    }
}

/// Issuer key generation.
pub fn setup<R: RngCore + CryptoRng>(rng: &mut R) -> (IssuerSecretKey, GroupPublicKey) {
    let x = random_nonzero_scalar(rng);
    let y = random_nonzero_scalar(rng);
    let g2 = SystemParams::g2();
    let (big_x, big_y) = (g2 * x, g2 * y);
    let gpk = GroupPublicKey {
        x: big_x.to_affine(),
        y: big_y.to_affine(),
        proof_x: spk_dlog_prove(&x, &g2, &big_x, SETUP_MSG, rng),
        proof_y: spk_dlog_prove(&y, &g2, &big_y, SETUP_MSG, rng),
    };
    (IssuerSecretKey { x, y }, gpk)
}

/// c ← H(X, Y, π, u_pk), serialized as the message of π1.
fn join_challenge(gpk: &GroupPublicKey, u_pk: &[u8; UPK_LEN]) -> [u8; 32] {
    let c = Transcript::new()
        .append(&gpk.x.to_compressed())
        .append(&gpk.y.to_compressed())
        .append(&gpk.proof_x.to_bytes())
        .append(&gpk.proof_y.to_bytes())
        .append(u_pk)
        .challenge();
    crate::pairing::scalar_to_bytes(&c)
}

/// User side of join, first message.
pub fn join_user_init<R: RngCore + CryptoRng>(
    gpk: &GroupPublicKey,
    id: &UserIdentity,
    rng: &mut R,
) -> (UserDaaKey, JoinRequest) {
    let gsk = random_nonzero_scalar(rng);
    let u_pk = id.public_key();
    let g1 = SystemParams::g1();
    let q = g1 * gsk;
    let pi1 = spk_dlog_prove(&gsk, &g1, &q, &join_challenge(gpk, &u_pk), rng);
    let q = q.to_affine();
    let sig_msg = id.sign(&JoinRequest::signed_bytes(&u_pk, &q, &pi1));
    (UserDaaKey { gsk }, JoinRequest { u_pk, q, pi1, sig_msg })
}

/// Checks a join request's identity signature and proof of knowledge of gsk.
pub fn verify_join_request(gpk: &GroupPublicKey, req: &JoinRequest) -> bool {
    let signed = JoinRequest::signed_bytes(&req.u_pk, &req.q, &req.pi1);
    verify_identity_signature(&req.u_pk, &signed, &req.sig_msg)
        && !bool::from(req.q.is_identity())
        && spk_dlog_verify(&G1Projective::from(req.q), &SystemParams::g1(), &req.pi1, &join_challenge(gpk, &req.u_pk))
}

/// Computes a fresh credential for Q = g1^gsk.
pub fn issue_credential<R: RngCore + CryptoRng>(isk: &IssuerSecretKey, q: &G1Affine, rng: &mut R) -> Credential {
    let r = random_nonzero_scalar(rng);
    let q = G1Projective::from(q);
    let g1 = SystemParams::g1();
    let a = g1 * r;
    let t = r * isk.y;
    let b = g1 * t;
    let d = q * t;
    let c = a * isk.x + q * (t * isk.x);
    let (a, c) = (a.to_affine(), c.to_affine());
    let pi2 = spk_dlogeq_prove(&t, &g1, &q, &b, &d, &Credential::proof_msg(&a, &c), rng);
    Credential { a, b: b.to_affine(), c, d: d.to_affine(), pi2 }
}

/// Issuer side of join. A user that already holds a credential under this key
/// receives the stored one again.
pub fn join_issuer<R: RngCore + CryptoRng>(
    isk: &IssuerSecretKey,
    gpk: &GroupPublicKey,
    req: &JoinRequest,
    registry: &dyn UserRegistry,
    issued: &IssuedCredentials,
    rng: &mut R,
) -> Result<Credential, JoinError> {
    if !verify_join_request(gpk, req) {
        return Err(JoinError::BadProof);
    }
    if !registry.is_registered(&req.u_pk) {
        return Err(JoinError::Unregistered);
    }
    let slot = issued.slot(&req.u_pk);
    let mut guard = slot.lock().unwrap();
    if let Some(existing) = *guard {
        return Ok(existing);
    }
    let cred = issue_credential(isk, &req.q, rng);
    *guard = Some(cred);
    Ok(cred)
}

fn pairing_checks(prepared: &PreparedGroupKey, a: &G1Affine, b: &G1Affine, c: &G1Affine, d: &G1Affine) -> bool {
    if bool::from(a.is_identity()) {
        return false;
    }
    // e(a, Y) = e(b, g2) and e(c, g2) = e(a·d, X), folded into one product
    // with a random 128-bit weight r:
    // e(a, Y) · e(c^r / b, g2) · e((a·d)^-r, X) = 1
    let mut w = [0u8; 16];
    OsRng.fill_bytes(&mut w);
    let w = u128::from_le_bytes(w) | 1;
    let r = Scalar::from_raw([w as u64, (w >> 64) as u64, 0, 0]);
    let terms = [G1Projective::from(c) * r - b, -(G1Projective::from(a) + d) * r];
    let mut affine = [G1Affine::identity(); 2];
    G1Projective::batch_normalize(&terms, &mut affine);
    multi_miller_loop(&[(a, &prepared.y), (&affine[0], prepared.g2), (&affine[1], &prepared.x)])
        .final_exponentiation()
        .is_identity()
        .into()
}

/// User side of join, final step: accept the credential only if it is valid
/// for our gsk under `gpk`.
pub fn join_user_finish(
    gpk: &GroupPublicKey,
    gsk: &UserDaaKey,
    cred: &Credential,
) -> Result<Credential, BadCredential> {
    let g1 = SystemParams::g1();
    let q = g1 * gsk.gsk;
    let proof_ok = spk_dlogeq_verify(
        &g1,
        &q,
        &G1Projective::from(cred.b),
        &G1Projective::from(cred.d),
        &cred.pi2,
        &Credential::proof_msg(&cred.a, &cred.c),
    );
    if proof_ok && pairing_checks(&gpk.prepare(), &cred.a, &cred.b, &cred.c, &cred.d) {
        Ok(*cred)
    } else {
        Err(BadCredential)
    }
}

#[allow(clippy::too_many_arguments)]
fn sign_msg(a: &G1Affine, b: &G1Affine, c: &G1Affine, d: &G1Affine, tag: &G1Affine, bsn: &[u8], m: &[u8]) -> Vec<u8> {
    let mut t = Transcript::new();
    t.append(SIGN_MSG_DST);
    for p in [a, b, c, d, tag] {
        t.append(&p.to_compressed());
    }
    t.append(bsn).append(m);
    t.into_bytes()
}

/// Signs `m` under basename `bsn`. The tag depends only on (gsk, bsn); the
/// credential part is re-randomized on every call.
pub fn sign<R: RngCore + CryptoRng>(
    gsk: &UserDaaKey,
    cred: &Credential,
    bsn: &[u8],
    m: &[u8],
    rng: &mut R,
) -> DaaSignature {
    let r = random_nonzero_scalar(rng);
    let mut rand = [
        G1Projective::from(cred.a) * r,
        G1Projective::from(cred.b) * r,
        G1Projective::from(cred.c) * r,
        G1Projective::from(cred.d) * r,
        G1Projective::identity(),
    ];
    let h = hash_to_g1(bsn);
    rand[4] = h * gsk.gsk;
    let mut affine = [G1Affine::identity(); 5];
    G1Projective::batch_normalize(&rand, &mut affine);
    let [a, b, c, d, tag] = affine;
    let msg = sign_msg(&a, &b, &c, &d, &tag, bsn, m);
    let pi = spk_dlogeq_prove(&gsk.gsk, &h, &rand[1], &rand[4], &rand[3], &msg, rng);
    DaaSignature { a, b, c, d, pi, tag }
}

pub fn verify(gpk: &GroupPublicKey, bsn: &[u8], m: &[u8], sig: &DaaSignature) -> bool {
    verify_prepared(&gpk.prepare(), bsn, m, sig)
}

pub fn verify_prepared(pk: &PreparedGroupKey, bsn: &[u8], m: &[u8], sig: &DaaSignature) -> bool {
    let msg = sign_msg(&sig.a, &sig.b, &sig.c, &sig.d, &sig.tag, bsn, m);
    let proof_ok = spk_dlogeq_verify(
        &hash_to_g1(bsn),
        &G1Projective::from(sig.b),
        &G1Projective::from(sig.tag),
        &G1Projective::from(sig.d),
        &sig.pi,
        &msg,
    );
    proof_ok && pairing_checks(pk, &sig.a, &sig.b, &sig.c, &sig.d)
}

/// Canonical encoding of the linkability tag.
pub fn extract_tag(sig: &DaaSignature) -> [u8; G1_LEN] {
    sig.tag.to_compressed()
}

#[allow(clippy::too_many_arguments)]
pub fn link(
    sig1: &DaaSignature,
    sig2: &DaaSignature,
    gpk: &GroupPublicKey,
    bsn1: &[u8],
    m1: &[u8],
    bsn2: &[u8],
    m2: &[u8],
) -> LinkResult {
    if !verify(gpk, bsn1, m1, sig1) || !verify(gpk, bsn2, m2, sig2) {
        return LinkResult::Invalid;
    }
    if extract_tag(sig1) == extract_tag(sig2) {
        LinkResult::Linked
    } else {
        LinkResult::Unlinked
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;

    struct Fixture {
        isk: IssuerSecretKey,
        gpk: GroupPublicKey,
        id: UserIdentity,
        registry: HashSet<[u8; UPK_LEN]>,
        issued: IssuedCredentials,
    }

    fn fixture() -> Fixture {
        let (isk, gpk) = setup(&mut OsRng);
        let id = UserIdentity::generate(&mut OsRng);
        let registry = HashSet::from([id.public_key()]);
        Fixture { isk, gpk, id, registry, issued: IssuedCredentials::new() }
    }

    fn joined(f: &Fixture) -> (UserDaaKey, Credential) {
        let (gsk, req) = join_user_init(&f.gpk, &f.id, &mut OsRng);
        let cred = join_issuer(&f.isk, &f.gpk, &req, &f.registry, &f.issued, &mut OsRng).unwrap();
        (gsk.clone(), join_user_finish(&f.gpk, &gsk, &cred).unwrap())
    }

    #[test]
    fn setup_is_self_consistent() {
        let (isk, gpk) = setup(&mut OsRng);
        assert!(gpk.verify_proofs());
        assert_eq!(G2Affine::from(SystemParams::g2() * isk.x()), gpk.x);
        assert_eq!(G2Affine::from(SystemParams::g2() * isk.y()), gpk.y);
        let (_, other) = setup(&mut OsRng);
        assert_ne!(gpk, other);
    }

    #[test]
    fn honest_join_sign_verify() {
        let f = fixture();
        let (gsk, cred) = joined(&f);
        let sig = sign(&gsk, &cred, b"bsn", b"hello", &mut OsRng);
        assert!(verify(&f.gpk, b"bsn", b"hello", &sig));
        assert!(!verify(&f.gpk, b"bsn", b"hullo", &sig));
        assert!(!verify(&f.gpk, b"bsn2", b"hello", &sig));
    }

    #[test]
    fn join_rejects_foreign_gpk_binding() {
        let f = fixture();
        let (_, other_gpk) = setup(&mut OsRng);
        let (_, req) = join_user_init(&other_gpk, &f.id, &mut OsRng);
        let err = join_issuer(&f.isk, &f.gpk, &req, &f.registry, &f.issued, &mut OsRng);
        assert_eq!(err, Err(JoinError::BadProof));
    }

    #[test]
    fn join_rejects_stripped_signature_and_unregistered() {
        let f = fixture();
        let (_, mut req) = join_user_init(&f.gpk, &f.id, &mut OsRng);
        let good = req;
        req.sig_msg = [0u8; 64];
        assert_eq!(join_issuer(&f.isk, &f.gpk, &req, &f.registry, &f.issued, &mut OsRng), Err(JoinError::BadProof));
        let empty = HashSet::new();
        assert_eq!(join_issuer(&f.isk, &f.gpk, &good, &empty, &f.issued, &mut OsRng), Err(JoinError::Unregistered));
    }

    #[test]
    fn join_rejects_shifted_q() {
        let f = fixture();
        let (_, mut req) = join_user_init(&f.gpk, &f.id, &mut OsRng);
        req.q = (G1Projective::from(req.q) + SystemParams::g1()).to_affine();
        assert_eq!(join_issuer(&f.isk, &f.gpk, &req, &f.registry, &f.issued, &mut OsRng), Err(JoinError::BadProof));
    }

    #[test]
    fn repeated_join_returns_stored_credential() {
        let f = fixture();
        let (_, req1) = join_user_init(&f.gpk, &f.id, &mut OsRng);
        let c1 = join_issuer(&f.isk, &f.gpk, &req1, &f.registry, &f.issued, &mut OsRng).unwrap();
        let c2 = join_issuer(&f.isk, &f.gpk, &req1, &f.registry, &f.issued, &mut OsRng).unwrap();
        assert_eq!(c1.to_bytes(), c2.to_bytes());
        assert_eq!(f.issued.len(), 1);
    }

    #[test]
    fn finish_rejects_tampered_credentials() {
        let f = fixture();
        let (gsk, req) = join_user_init(&f.gpk, &f.id, &mut OsRng);
        let cred = join_issuer(&f.isk, &f.gpk, &req, &f.registry, &f.issued, &mut OsRng).unwrap();
        let mut ident = cred;
        ident.a = G1Affine::identity();
        assert_eq!(join_user_finish(&f.gpk, &gsk, &ident), Err(BadCredential));
        let mut bumped = cred;
        bumped.d = (G1Projective::from(cred.d) * Scalar::from(2u64)).to_affine();
        assert_eq!(join_user_finish(&f.gpk, &gsk, &bumped), Err(BadCredential));
        // Valid pi2 but the d-perturbation must also fail the pairing equation on its own.
        let prepared = f.gpk.prepare();
        assert!(!pairing_checks(&prepared, &bumped.a, &bumped.b, &bumped.c, &bumped.d));
    }

    #[test]
    fn tags_depend_only_on_key_and_basename() {
        let f = fixture();
        let (gsk, cred) = joined(&f);
        let s1 = sign(&gsk, &cred, b"A", b"m1", &mut OsRng);
        let s2 = sign(&gsk, &cred, b"A", b"m2", &mut OsRng);
        let s3 = sign(&gsk, &cred, b"B", b"m1", &mut OsRng);
        assert_eq!(extract_tag(&s1), extract_tag(&s2));
        assert_ne!(s1.a, s2.a);
        assert_ne!(extract_tag(&s1), extract_tag(&s3));
        assert_eq!(link(&s1, &s2, &f.gpk, b"A", b"m1", b"A", b"m2"), LinkResult::Linked);
        assert_eq!(link(&s1, &s3, &f.gpk, b"A", b"m1", b"B", b"m1"), LinkResult::Unlinked);
        assert_eq!(link(&s1, &s3, &f.gpk, b"A", b"m1", b"A", b"m1"), LinkResult::Invalid);
    }

    #[test]
    fn rerandomization_without_key_is_rejected() {
        let f = fixture();
        let (gsk, cred) = joined(&f);
        let sig = sign(&gsk, &cred, b"A", b"m", &mut OsRng);
        let r = Scalar::from(7u64);
        let bump = |p: G1Affine| (G1Projective::from(p) * r).to_affine();
        let forged = DaaSignature { a: bump(sig.a), b: bump(sig.b), c: bump(sig.c), d: bump(sig.d), ..sig };
        assert!(!verify(&f.gpk, b"A", b"m", &forged));
    }

    #[test]
    fn credential_does_not_verify_under_other_epoch() {
        let f = fixture();
        let (gsk, cred) = joined(&f);
        let (_, other) = setup(&mut OsRng);
        let sig = sign(&gsk, &cred, b"A", b"m", &mut OsRng);
        assert!(!verify(&other, b"A", b"m", &sig));
    }

    #[test]
    fn encodings_round_trip() {
        let f = fixture();
        let (gsk, req) = join_user_init(&f.gpk, &f.id, &mut OsRng);
        assert_eq!(JoinRequest::from_bytes(&req.to_bytes()).unwrap(), req);
        assert_eq!(GroupPublicKey::from_bytes(&f.gpk.to_bytes()).unwrap(), f.gpk);
        let cred = join_issuer(&f.isk, &f.gpk, &req, &f.registry, &f.issued, &mut OsRng).unwrap();
        assert_eq!(Credential::from_bytes(&cred.to_bytes()).unwrap(), cred);
        let sig = sign(&gsk, &cred, b"A", b"m", &mut OsRng);
        assert_eq!(DaaSignature::from_bytes(&sig.to_bytes()).unwrap(), sig);
        assert_eq!(UserDaaKey::from_bytes(&gsk.to_bytes()).unwrap(), gsk);
        let isk2 = IssuerSecretKey::from_bytes(&f.isk.to_bytes()).unwrap();
        assert_eq!(isk2.x(), f.isk.x());
    }
}
