//! Pairing groups, hashing into them, and the two Fiat–Shamir signatures of
//! knowledge used throughout the protocol.
//!
//! All hash inputs go through [`Transcript`], which writes every element as a
//! 4-byte big-endian length followed by its bytes. Points are hashed in their
//! compressed encoding; scalars as 32-byte big-endian.

use bls12_381::hash_to_curve::{ExpandMsgXmd, HashToCurve};
use ff::Field;
use group::{Group, GroupEncoding};
use rand_core::{CryptoRng, RngCore};
use sha2::{Digest, Sha512};

pub use bls12_381::{G1Affine, G1Projective, G2Affine, G2Projective, Gt, Scalar};

use crate::error::DecodeError;

/// Domain separation tag for the hash into G1.
pub const H1_DST: &[u8] = b"ANONLIMIT-H1-v1";
/// Domain separation tag for the hash into Z_q.
pub const H_DST: &[u8] = b"ANONLIMIT-H-v1";

pub const SCALAR_LEN: usize = 32;
pub const G1_LEN: usize = 48;
pub const G2_LEN: usize = 96;

/// Public parameters of the pairing setting: BLS12-381 with its standard
/// generators. Holds no state; every accessor is a constant.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemParams;

impl SystemParams {
    /// Big-endian encoding of the prime group order q.
    pub const ORDER_BE: [u8; 32] = [
        0x73, 0xed, 0xa7, 0x53, 0x29, 0x9d, 0x7d, 0x48, 0x33, 0x39, 0xd8, 0x08, 0x09, 0xa1, 0xd8, 0x05, 0x53, 0xbd,
        0xa4, 0x02, 0xff, 0xfe, 0x5b, 0xfe, 0xff, 0xff, 0xff, 0xff, 0x00, 0x00, 0x00, 0x01,
    ];
    pub const ORDER_BITS: u32 = 255;

    pub fn g1() -> G1Projective {
        G1Projective::generator()
    }

    pub fn g2() -> G2Projective {
        G2Projective::generator()
    }

    pub fn pair(p: &G1Affine, q: &G2Affine) -> Gt {
        bls12_381::pairing(p, q)
    }
}

/// Hashes arbitrary bytes to a point of the prime-order subgroup of G1
/// (simplified SWU, RFC 9380 `hash_to_curve`).
pub fn hash_to_g1(input: &[u8]) -> G1Projective {
    <G1Projective as HashToCurve<ExpandMsgXmd<sha2_v09::Sha256>>>::hash_to_curve(input, H1_DST)
}

/// Samples a uniformly random nonzero scalar.
pub fn random_nonzero_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> Scalar {
    loop {
        let s = Scalar::random(&mut *rng);
        if !bool::from(s.is_zero()) {
            return s;
        }
    }
}

pub fn scalar_to_bytes(s: &Scalar) -> [u8; SCALAR_LEN] {
    let mut out = s.to_bytes();
    out.reverse();
    out
}

/// Decodes a big-endian scalar, rejecting values ≥ q.
pub fn scalar_from_bytes(bytes: &[u8]) -> Result<Scalar, DecodeError> {
    let mut le: [u8; SCALAR_LEN] =
        bytes.try_into().map_err(|_| DecodeError::Length { expected: SCALAR_LEN, got: bytes.len() })?;
    le.reverse();
    Option::from(Scalar::from_bytes(&le)).ok_or(DecodeError::Scalar)
}

pub fn g1_from_bytes(bytes: &[u8]) -> Result<G1Affine, DecodeError> {
    let arr: [u8; G1_LEN] = bytes.try_into().map_err(|_| DecodeError::Length { expected: G1_LEN, got: bytes.len() })?;
    Option::from(G1Affine::from_compressed(&arr)).ok_or(DecodeError::Point)
}

pub fn g2_from_bytes(bytes: &[u8]) -> Result<G2Affine, DecodeError> {
    let arr: [u8; G2_LEN] = bytes.try_into().map_err(|_| DecodeError::Length { expected: G2_LEN, got: bytes.len() })?;
    Option::from(G2Affine::from_compressed(&arr)).ok_or(DecodeError::Point)
}

/// Injective, length-prefixed encoding of a sequence of byte strings.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    buf: Vec<u8>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("transcript element exceeds 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn append_point<G: GroupEncoding>(&mut self, p: &G) -> &mut Self {
        self.append(p.to_bytes().as_ref())
    }

    pub fn append_scalar(&mut self, s: &Scalar) -> &mut Self {
        self.append(&scalar_to_bytes(s))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    /// H: maps the transcript to Z_q.
    pub fn challenge(&self) -> Scalar {
        let digest = Sha512::new().chain_update(H_DST).chain_update(&self.buf).finalize();
        let mut wide = [0u8; 64];
        wide.copy_from_slice(&digest);
        Scalar::from_bytes_wide(&wide)
    }
}

/// SPK{(x): y = g^x}(m), as the pair (c, s).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpkDlogProof {
    pub c: Scalar,
    pub s: Scalar,
}

/// SPK{(x): y = a^x ∧ z = b^x}(m), as the pair (c, s).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpkDlogEqProof {
    pub c: Scalar,
    pub s: Scalar,
}

pub const PROOF_LEN: usize = 2 * SCALAR_LEN;

macro_rules! proof_codec {
    ($ty:ty) => {
        impl $ty {
            pub fn to_bytes(&self) -> [u8; PROOF_LEN] {
                let mut out = [0u8; PROOF_LEN];
                out[..SCALAR_LEN].copy_from_slice(&scalar_to_bytes(&self.c));
                out[SCALAR_LEN..].copy_from_slice(&scalar_to_bytes(&self.s));
                out
            }

            pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
                if bytes.len() != PROOF_LEN {
                    return Err(DecodeError::Length { expected: PROOF_LEN, got: bytes.len() });
                }
                Ok(Self { c: scalar_from_bytes(&bytes[..SCALAR_LEN])?, s: scalar_from_bytes(&bytes[SCALAR_LEN..])? })
            }
        }
    };
}

proof_codec!(SpkDlogProof);
proof_codec!(SpkDlogEqProof);

fn dlog_challenge<G: GroupEncoding>(msg: &[u8], y: &G, g: &G, commitment: &G) -> Scalar {
    Transcript::new().append(msg).append_point(y).append_point(g).append_point(commitment).challenge()
}

#[allow(clippy::too_many_arguments)]
fn dlogeq_challenge<G: GroupEncoding>(msg: &[u8], y: &G, z: &G, a: &G, b: &G, ta: &G, tb: &G) -> Scalar {
    Transcript::new()
        .append(msg)
        .append_point(y)
        .append_point(z)
        .append_point(a)
        .append_point(b)
        .append_point(ta)
        .append_point(tb)
        .challenge()
}

/// Proves knowledge of `x` with `y = g^x`, bound to `msg`.
pub fn spk_dlog_prove<G, R>(x: &Scalar, g: &G, y: &G, msg: &[u8], rng: &mut R) -> SpkDlogProof
where
    G: Group<Scalar = Scalar> + GroupEncoding,
    R: RngCore + CryptoRng,
{
    let r = Scalar::random(&mut *rng);
    let c = dlog_challenge(msg, y, g, &(*g * r));
    SpkDlogProof { c, s: r - c * x }
}

pub fn spk_dlog_verify<G>(y: &G, g: &G, proof: &SpkDlogProof, msg: &[u8]) -> bool
where
    G: Group<Scalar = Scalar> + GroupEncoding,
{
    let commitment = *g * proof.s + *y * proof.c;
    dlog_challenge(msg, y, g, &commitment) == proof.c
}

/// Proves `y = a^x ∧ z = b^x`, bound to `msg`.
pub fn spk_dlogeq_prove<G, R>(x: &Scalar, a: &G, b: &G, y: &G, z: &G, msg: &[u8], rng: &mut R) -> SpkDlogEqProof
where
    G: Group<Scalar = Scalar> + GroupEncoding,
    R: RngCore + CryptoRng,
{
    let r = Scalar::random(&mut *rng);
    let c = dlogeq_challenge(msg, y, z, a, b, &(*a * r), &(*b * r));
    SpkDlogEqProof { c, s: r - c * x }
}

pub fn spk_dlogeq_verify<G>(a: &G, b: &G, y: &G, z: &G, proof: &SpkDlogEqProof, msg: &[u8]) -> bool
where
    G: Group<Scalar = Scalar> + GroupEncoding,
{
    let ta = *a * proof.s + *y * proof.c;
    let tb = *b * proof.s + *z * proof.c;
    dlogeq_challenge(msg, y, z, a, b, &ta, &tb) == proof.c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;
    use std::collections::HashSet;

    #[test]
    fn order_constant_matches_field() {
        // q - 1 encodes; q itself does not.
        let minus_one = -Scalar::ONE;
        let mut q_minus_one = SystemParams::ORDER_BE;
        q_minus_one[31] -= 1;
        assert_eq!(scalar_to_bytes(&minus_one), q_minus_one);
        assert_eq!(scalar_from_bytes(&SystemParams::ORDER_BE), Err(DecodeError::Scalar));
    }

    #[test]
    fn bilinearity_and_non_degeneracy() {
        let mut rng = OsRng;
        let a = Scalar::random(&mut rng);
        let b = Scalar::random(&mut rng);
        let g1 = SystemParams::g1();
        let g2 = SystemParams::g2();
        let lhs = SystemParams::pair(&(g1 * a).into(), &(g2 * b).into());
        let base = SystemParams::pair(&g1.into(), &g2.into());
        assert_eq!(lhs, base * (a * b));
        assert_ne!(base, Gt::identity());
    }

    #[test]
    fn dlog_round_trip_and_message_binding() {
        let mut rng = OsRng;
        let x = Scalar::random(&mut rng);
        let g = SystemParams::g1();
        let y = g * x;
        let p = spk_dlog_prove(&x, &g, &y, b"m", &mut rng);
        assert!(spk_dlog_verify(&y, &g, &p, b"m"));
        assert!(!spk_dlog_verify(&y, &g, &p, b"m'"));
        let bumped = SpkDlogProof { s: p.s + Scalar::ONE, ..p };
        assert!(!spk_dlog_verify(&y, &g, &bumped, b"m"));
        assert!(!spk_dlog_verify(&(y + g), &g, &p, b"m"));
    }

    #[test]
    fn dlog_works_in_g2() {
        let mut rng = OsRng;
        let x = Scalar::random(&mut rng);
        let g = SystemParams::g2();
        let p = spk_dlog_prove(&x, &g, &(g * x), b"", &mut rng);
        assert!(spk_dlog_verify(&(g * x), &g, &p, b""));
    }

    #[test]
    fn dlog_proofs_are_randomized() {
        let mut rng = OsRng;
        let x = Scalar::random(&mut rng);
        let g = SystemParams::g1();
        let y = g * x;
        let seen: HashSet<[u8; PROOF_LEN]> =
            (0..100).map(|_| spk_dlog_prove(&x, &g, &y, b"m", &mut rng).to_bytes()).collect();
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn dlogeq_round_trip_and_mutations() {
        let mut rng = OsRng;
        let x = Scalar::random(&mut rng);
        let a = hash_to_g1(b"base-a");
        let b = SystemParams::g1() * Scalar::random(&mut rng);
        let (y, z) = (a * x, b * x);
        let p = spk_dlogeq_prove(&x, &a, &b, &y, &z, b"m", &mut rng);
        assert!(spk_dlogeq_verify(&a, &b, &y, &z, &p, b"m"));
        assert!(!spk_dlogeq_verify(&a, &b, &y, &z, &p, b"n"));
        assert!(!spk_dlogeq_verify(&a, &b, &y, &(b * (x + Scalar::ONE)), &p, b"m"));
        let swapped = SpkDlogEqProof { c: p.s, s: p.c };
        assert!(!spk_dlogeq_verify(&a, &b, &y, &z, &swapped, b"m"));
    }

    #[test]
    fn hash_to_g1_is_deterministic_and_valid() {
        let p = hash_to_g1(b"abc");
        assert_eq!(p, hash_to_g1(b"abc"));
        assert_ne!(p, hash_to_g1(b"abd"));
        let affine = G1Affine::from(p);
        assert!(bool::from(affine.is_on_curve()));
        assert!(bool::from(affine.is_torsion_free()));
        assert!(!bool::from(affine.is_identity()));
    }

    #[test]
    fn transcript_is_injective_on_boundaries() {
        let mut t1 = Transcript::new();
        t1.append(b"ab").append(b"c");
        let mut t2 = Transcript::new();
        t2.append(b"a").append(b"bc");
        assert_ne!(t1.as_bytes(), t2.as_bytes());
        assert_ne!(t1.challenge(), t2.challenge());
        assert_eq!(&t1.as_bytes()[..4], &[0, 0, 0, 2]);
    }

    #[test]
    fn malformed_points_are_rejected() {
        assert!(g1_from_bytes(&[0xffu8; G1_LEN]).is_err());
        assert!(g1_from_bytes(&[0u8; 10]).is_err());
        assert!(g2_from_bytes(&[0x11u8; G2_LEN]).is_err());
    }
}
