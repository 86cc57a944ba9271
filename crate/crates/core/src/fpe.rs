//! Small-domain format-preserving encryption: a keyed permutation of
//! `{0, .., N-1}` built from a balanced Feistel network over `2^(2h)` values
//! with AES-128 as the round function, restricted to the domain by cycle
//! walking.

use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FPE_KEY_LEN: usize = 16;
pub const FEISTEL_ROUNDS: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FpeError {
    #[error("domain size must be at least 1")]
    EmptyDomain,
    #[error("value {value} outside domain of size {n}")]
    OutOfDomain { value: u64, n: u64 },
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FpeKey(#[serde(with = "hex::serde")] pub [u8; FPE_KEY_LEN]);

impl FpeKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; FPE_KEY_LEN];
        rng.fill_bytes(&mut k);
        Self(k)
    }
}

impl std::fmt::Debug for FpeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FpeKey(..)")
    }
}

/// A keyed cipher that can be reused across many calls and domain sizes.
pub struct FpeCipher {
    aes: Aes128,
}

impl FpeCipher {
    pub fn new(key: &FpeKey) -> Self {
        Self { aes: Aes128::new(&key.0.into()) }
    }

    fn round(&self, round: u8, half_bits: u32, n: u64, right: u64) -> u64 {
        let mut block = [0u8; 16];
        block[0] = round;
        block[1] = half_bits as u8;
        block[2..10].copy_from_slice(&n.to_be_bytes());
        block[10..14].copy_from_slice(&(right as u32).to_be_bytes());
        let mut block = block.into();
        self.aes.encrypt_block(&mut block);
        u64::from_be_bytes(block[..8].try_into().unwrap())
    }

    fn feistel(&self, half_bits: u32, n: u64, v: u64) -> u64 {
        let mask = (1u64 << half_bits) - 1;
        let (mut left, mut right) = (v >> half_bits, v & mask);
        for r in 0..FEISTEL_ROUNDS {
            let f = self.round(r, half_bits, n, right) & mask;
            (left, right) = (right, left ^ f);
        }
        (left << half_bits) | right
    }

    pub fn encrypt(&self, n: u64, value: u64) -> Result<u64, FpeError> {
        if n == 0 {
            return Err(FpeError::EmptyDomain);
        }
        if value >= n {
            return Err(FpeError::OutOfDomain { value, n });
        }
        if n == 1 {
            return Ok(0);
        }
        let bits = 64 - (n - 1).leading_zeros();
        let half_bits = bits.div_ceil(2).max(1);
        // Domain 2^(2h) < 4N, so the walk takes fewer than 4 steps in expectation.
        let mut out = self.feistel(half_bits, n, value);
        while out >= n {
            out = self.feistel(half_bits, n, out);
        }
        Ok(out)
    }
}

/// Encrypts `value` in `[0, n)` to another value in `[0, n)`.
pub fn fpe_encrypt(key: &FpeKey, n: u64, value: u64) -> Result<u64, FpeError> {
    FpeCipher::new(key).encrypt(n, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;

    fn permutation(key: &FpeKey, n: u64) -> Vec<u64> {
        let c = FpeCipher::new(key);
        (0..n).map(|i| c.encrypt(n, i).unwrap()).collect()
    }

    #[test]
    fn singleton_domain() {
        let key = FpeKey::generate(&mut OsRng);
        assert_eq!(fpe_encrypt(&key, 1, 0), Ok(0));
    }

    #[test]
    fn domain_errors() {
        let key = FpeKey([0; 16]);
        assert_eq!(fpe_encrypt(&key, 0, 0), Err(FpeError::EmptyDomain));
        assert_eq!(fpe_encrypt(&key, 5, 5), Err(FpeError::OutOfDomain { value: 5, n: 5 }));
    }

    #[test]
    fn five_is_a_permutation() {
        let key = FpeKey::generate(&mut OsRng);
        let mut p = permutation(&key, 5);
        p.sort_unstable();
        assert_eq!(p, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn deterministic() {
        let key = FpeKey([7; 16]);
        assert_eq!(permutation(&key, 101), permutation(&key, 101));
    }

    #[test]
    fn keys_give_different_permutations() {
        for _ in 0..50 {
            let k1 = FpeKey::generate(&mut OsRng);
            let k2 = FpeKey::generate(&mut OsRng);
            assert_ne!(permutation(&k1, 16), permutation(&k2, 16));
        }
    }

    #[test]
    fn large_domains_stay_in_range() {
        let key = FpeKey::generate(&mut OsRng);
        for n in [u64::MAX, 1 << 40, (1 << 33) + 1] {
            for v in [0, 1, n / 2, n - 1] {
                assert!(fpe_encrypt(&key, n, v).unwrap() < n);
            }
        }
    }
}
