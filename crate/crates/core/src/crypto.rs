//! Fixed-width crypto values and the four primitives the protocol is built on:
//! single-block AES-128, XOR combination, AES-CMAC and the xorshiftr+
//! nonce generator.

use std::fmt;

use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use cmac::{Cmac, Mac};
use serde::{Deserialize, Serialize};

/// Width in bytes of every key, block, nonce and tag.
pub const BLOCK_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("expected {expected} bytes, got {actual}")]
    InvalidLength { expected: usize, actual: usize },
    #[error("MAC input must not be empty")]
    EmptyMessage,
    #[error("generator state must not be all zero")]
    ZeroSeed,
    #[error("invalid hex: {0}")]
    InvalidHex(String),
}

fn array_from_slice(bytes: &[u8]) -> Result<[u8; BLOCK_LEN], CryptoError> {
    bytes.try_into().map_err(|_| CryptoError::InvalidLength {
        expected: BLOCK_LEN,
        actual: bytes.len(),
    })
}

macro_rules! fixed_width {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
        #[serde(into = "String", try_from = "String")]
        pub struct $name(pub [u8; BLOCK_LEN]);

        impl $name {
            pub const ZERO: Self = Self([0u8; BLOCK_LEN]);

            pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
                array_from_slice(bytes).map(Self)
            }

            pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
                let bytes = hex::decode(s).map_err(|e| CryptoError::InvalidHex(e.to_string()))?;
                Self::from_slice(&bytes)
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn as_bytes(&self) -> &[u8; BLOCK_LEN] {
                &self.0
            }
        }

        impl From<[u8; BLOCK_LEN]> for $name {
            fn from(bytes: [u8; BLOCK_LEN]) -> Self {
                Self(bytes)
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.to_hex()
            }
        }

        impl TryFrom<String> for $name {
            type Error = CryptoError;

            fn try_from(s: String) -> Result<Self, Self::Error> {
                Self::from_hex(&s)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }
    };
}

fixed_width!(
    /// 128-bit symmetric key: a vehicle key or the group key.
    SecretKey
);
fixed_width!(
    /// One cipher block. Identities and every intermediate protocol value
    /// are blocks.
    Block
);
fixed_width!(
    /// Session nonce drawn from [`PrngState::next_nonce`].
    Nonce
);
fixed_width!(MacTag);

impl SecretKey {
    pub fn is_all_zero(&self) -> bool {
        self.0 == [0u8; BLOCK_LEN]
    }
}

impl From<Nonce> for Block {
    fn from(n: Nonce) -> Block {
        Block(n.0)
    }
}

/// Milliseconds since the Unix epoch.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    /// Left-pads the big-endian millisecond count to a full block.
    pub fn to_block(self) -> Block {
        let mut out = [0u8; BLOCK_LEN];
        out[8..].copy_from_slice(&self.0.to_be_bytes());
        Block(out)
    }

    /// Inverse of [`Timestamp::to_block`]. Returns `None` when any of the
    /// upper eight padding bytes is nonzero.
    pub fn from_block(block: &Block) -> Option<Timestamp> {
        if block.0[..8].iter().any(|&b| b != 0) {
            return None;
        }
        let mut low = [0u8; 8];
        low.copy_from_slice(&block.0[8..]);
        Some(Timestamp(u64::from_be_bytes(low)))
    }

    pub fn saturating_since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// E(X, k): one AES-128 block encryption.
pub fn encrypt_block(plaintext: &Block, key: &SecretKey) -> Block {
    let cipher = Aes128::new(&key.0.into());
    let mut block = plaintext.0.into();
    cipher.encrypt_block(&mut block);
    Block(block.into())
}

/// D(E, k): one AES-128 block decryption.
pub fn decrypt_block(ciphertext: &Block, key: &SecretKey) -> Block {
    let cipher = Aes128::new(&key.0.into());
    let mut block = ciphertext.0.into();
    cipher.decrypt_block(&mut block);
    Block(block.into())
}

/// Slice form of [`encrypt_block`] for callers holding unchecked bytes.
pub fn encrypt_slice(plaintext: &[u8], key: &[u8]) -> Result<Block, CryptoError> {
    Ok(encrypt_block(
        &Block::from_slice(plaintext)?,
        &SecretKey::from_slice(key)?,
    ))
}

pub fn decrypt_slice(ciphertext: &[u8], key: &[u8]) -> Result<Block, CryptoError> {
    Ok(decrypt_block(
        &Block::from_slice(ciphertext)?,
        &SecretKey::from_slice(key)?,
    ))
}

pub fn xor_combine(a: &Block, b: &Block) -> Block {
    let mut out = [0u8; BLOCK_LEN];
    for (o, (x, y)) in out.iter_mut().zip(a.0.iter().zip(b.0.iter())) {
        *o = x ^ y;
    }
    Block(out)
}

/// AES-CMAC (RFC 4493) over `message`.
pub fn compute_mac(message: &[u8], key: &SecretKey) -> Result<MacTag, CryptoError> {
    if message.is_empty() {
        return Err(CryptoError::EmptyMessage);
    }
    let mut mac = <Cmac<Aes128> as KeyInit>::new(&key.0.into());
    mac.update(message);
    Ok(MacTag(mac.finalize().into_bytes().into()))
}

/// Recomputes the tag and compares in constant time. An empty message never
/// verifies.
pub fn verify_mac(message: &[u8], tag: &MacTag, key: &SecretKey) -> bool {
    let Ok(expected) = compute_mac(message, key) else {
        return false;
    };
    let diff = expected
        .0
        .iter()
        .zip(tag.0.iter())
        .fold(0u8, |acc, (a, b)| acc | (a ^ b));
    diff == 0
}

/// xorshiftr+ generator state.
///
/// Same state layout as xorshift128+ but with the third shift dropped and the
/// pre-addition word returned:
///
/// ```text
/// x = s0; y = s1; s0 = y
/// x ^= x << 23; x ^= x >> 17; x ^= y
/// s1 = x + y; return x
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrngState {
    s0: u64,
    s1: u64,
}

impl PrngState {
    pub fn new(s0: u64, s1: u64) -> Result<Self, CryptoError> {
        if s0 == 0 && s1 == 0 {
            return Err(CryptoError::ZeroSeed);
        }
        Ok(PrngState { s0, s1 })
    }

    /// Expands a single 64-bit seed into a valid state with splitmix64.
    pub fn from_seed(seed: u64) -> Self {
        let mut z = seed;
        let s0 = splitmix64(&mut z);
        let s1 = splitmix64(&mut z);
        // splitmix64 is a bijection on its counter, so two consecutive zero
        // outputs cannot happen.
        PrngState { s0, s1 }
    }

    pub fn words(&self) -> (u64, u64) {
        (self.s0, self.s1)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.s0;
        let y = self.s1;
        self.s0 = y;
        x ^= x << 23;
        x ^= x >> 17;
        x ^= y;
        self.s1 = x.wrapping_add(y);
        x
    }

    /// Two consecutive outputs, big-endian, first output first.
    pub fn next_nonce(mut self) -> (Nonce, PrngState) {
        let n = self.draw_nonce();
        (n, self)
    }

    /// In-place form of [`PrngState::next_nonce`].
    pub fn draw_nonce(&mut self) -> Nonce {
        let hi = self.next_u64();
        let lo = self.next_u64();
        let mut out = [0u8; BLOCK_LEN];
        out[..8].copy_from_slice(&hi.to_be_bytes());
        out[8..].copy_from_slice(&lo.to_be_bytes());
        Nonce(out)
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn block(hex: &str) -> Block {
        Block::from_hex(hex).unwrap()
    }

    fn key(hex: &str) -> SecretKey {
        SecretKey::from_hex(hex).unwrap()
    }

    // FIPS-197 appendix C.1, confirmed with an independent AES implementation
    // (tests/oracle/protocol_oracle.py).
    #[test]
    fn aes_known_answer() {
        let k = key("000102030405060708090a0b0c0d0e0f");
        let pt = block("00112233445566778899aabbccddeeff");
        let ct = encrypt_block(&pt, &k);
        assert_eq!(ct.to_hex(), "69c4e0d86a7b0430d8cdb78070b4c55a");
        assert_eq!(decrypt_block(&ct, &k), pt);
    }

    #[test]
    fn wrong_length_is_usage_error() {
        assert_eq!(
            encrypt_slice(&[0u8; 15], &[0u8; 16]),
            Err(CryptoError::InvalidLength {
                expected: 16,
                actual: 15
            })
        );
        assert!(decrypt_slice(&[0u8; 16], &[0u8; 17]).is_err());
        assert!(Block::from_hex("00ff").is_err());
        assert!(matches!(
            Block::from_hex("zz"),
            Err(CryptoError::InvalidHex(_))
        ));
    }

    #[test]
    fn distinct_keys_distinct_ciphertexts() {
        let mut prng = PrngState::new(7, 11).unwrap();
        for _ in 0..100 {
            let k1 = SecretKey(prng.draw_nonce().0);
            let k2 = SecretKey(prng.draw_nonce().0);
            let x = Block(prng.draw_nonce().0);
            assert_ne!(k1, k2);
            assert_ne!(encrypt_block(&x, &k1), encrypt_block(&x, &k2));
            assert_ne!(decrypt_block(&encrypt_block(&x, &k1), &k2), x);
        }
    }

    // RFC 4493 example 2, plus a protocol-shaped vector from the Python oracle.
    #[test]
    fn cmac_known_answer() {
        let k = key("2b7e151628aed2a6abf7158809cf4f3c");
        let msg = hex::decode("6bc1bee22e409f96e93d7e117393172a").unwrap();
        assert_eq!(
            compute_mac(&msg, &k).unwrap().to_hex(),
            "070a16b46b4d4144f79bdd9dd04a287c"
        );
        let tag = compute_mac(&[0xab; 32], &SecretKey([3; 16])).unwrap();
        assert_eq!(tag.to_hex(), "6e4338583fb4c2ca36f3775b05cd9cca");
    }

    #[test]
    fn empty_mac_input_rejected() {
        assert_eq!(
            compute_mac(&[], &SecretKey::ZERO),
            Err(CryptoError::EmptyMessage)
        );
        assert!(!verify_mac(&[], &MacTag::ZERO, &SecretKey::ZERO));
    }

    #[test]
    fn mac_bit_flips_and_wrong_keys() {
        let mut prng = PrngState::new(5, 9).unwrap();
        for i in 0..100 {
            let k = SecretKey(prng.draw_nonce().0);
            let mut msg = [prng.draw_nonce().0, prng.draw_nonce().0].concat();
            let tag = compute_mac(&msg, &k).unwrap();
            assert!(verify_mac(&msg, &tag, &k));
            let other = SecretKey(prng.draw_nonce().0);
            assert!(!verify_mac(&msg, &tag, &other));
            let bit = (prng.next_u64() % (msg.len() as u64 * 8)) as usize;
            msg[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(compute_mac(&msg, &k).unwrap(), tag, "trial {i}");
            assert!(!verify_mac(&msg, &tag, &k));
        }
    }

    // Frozen from the implemented generator; the Python oracle reproduces them.
    #[test]
    fn prng_golden_nonces() {
        let mut state = PrngState::new(1, 2).unwrap();
        let expected = [
            "000000000080004300000000018000c7",
            "00004000000010490001400006005259",
            "0000c008008426bb0007c03b179c0647",
            "040c000d1d0284db258c00964d06392b",
        ];
        for want in expected {
            let (n, next) = state.next_nonce();
            assert_eq!(n.to_hex(), want);
            state = next;
        }
    }

    #[test]
    fn prng_rejects_zero_seed() {
        assert_eq!(PrngState::new(0, 0), Err(CryptoError::ZeroSeed));
        assert!(PrngState::new(0, 1).is_ok());
    }

    #[test]
    fn prng_no_duplicate_nonces() {
        let mut state = PrngState::new(1, 2).unwrap();
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            assert!(seen.insert(state.draw_nonce()));
        }
    }

    #[test]
    fn prng_byte_frequency_smoke() {
        let mut state = PrngState::from_seed(42);
        let mut counts = [0u32; 256];
        let mut total = 0u32;
        while total < 100_000 {
            for b in state.next_u64().to_be_bytes() {
                counts[b as usize] += 1;
                total += 1;
            }
        }
        let expect = total as f64 / 256.0;
        for (value, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - expect).abs() / expect;
            assert!(dev <= 0.20, "byte {value:#04x}: {c} vs {expect:.1}");
        }
    }

    #[test]
    fn timestamp_padding_round_trip() {
        let t = Timestamp(1_700_000_000_000);
        let b = t.to_block();
        assert_eq!(&b.0[..8], &[0u8; 8]);
        assert_eq!(Timestamp::from_block(&b), Some(t));
        let mut dirty = b;
        dirty.0[0] = 1;
        assert_eq!(Timestamp::from_block(&dirty), None);
    }

    #[test]
    fn serde_uses_hex() {
        let n = Nonce([0xab; 16]);
        let json = serde_json::to_string(&n).unwrap();
        assert_eq!(json, format!("\"{}\"", "ab".repeat(16)));
        assert_eq!(serde_json::from_str::<Nonce>(&json).unwrap(), n);
    }

    fn arb_block() -> impl Strategy<Value = Block> {
        any::<[u8; 16]>().prop_map(Block)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn encrypt_decrypt_inverse(x in arb_block(), k in any::<[u8; 16]>()) {
            let k = SecretKey(k);
            prop_assert_eq!(decrypt_block(&encrypt_block(&x, &k), &k), x);
            prop_assert_eq!(encrypt_block(&decrypt_block(&x, &k), &k), x);
        }

        #[test]
        fn xor_laws(x in arb_block(), y in arb_block(), z in arb_block()) {
            prop_assert_eq!(xor_combine(&x, &Block::ZERO), x);
            prop_assert_eq!(xor_combine(&x, &x), Block::ZERO);
            prop_assert_eq!(xor_combine(&xor_combine(&x, &y), &y), x);
            prop_assert_eq!(xor_combine(&x, &y), xor_combine(&y, &x));
            prop_assert_eq!(
                xor_combine(&xor_combine(&x, &y), &z),
                xor_combine(&x, &xor_combine(&y, &z))
            );
        }

        #[test]
        fn mac_rejects_single_bit_perturbation(
            msg in proptest::collection::vec(any::<u8>(), 1..64),
            k in any::<[u8; 16]>(),
            bit in any::<usize>(),
            tag_bit in 0usize..128,
        ) {
            let k = SecretKey(k);
            let tag = compute_mac(&msg, &k).unwrap();
            prop_assert!(verify_mac(&msg, &tag, &k));

            let mut bad_msg = msg.clone();
            let b = bit % (msg.len() * 8);
            bad_msg[b / 8] ^= 1 << (b % 8);
            prop_assert!(!verify_mac(&bad_msg, &tag, &k));

            let mut bad_tag = tag;
            bad_tag.0[tag_bit / 8] ^= 1 << (tag_bit % 8);
            prop_assert!(!verify_mac(&msg, &bad_tag, &k));
        }

        #[test]
        fn prng_reproducible(s0 in any::<u64>(), s1 in 1u64..) {
            let mut a = PrngState::new(s0, s1).unwrap();
            let mut b = PrngState::new(s0, s1).unwrap();
            for _ in 0..8 {
                prop_assert_eq!(a.draw_nonce(), b.draw_nonce());
            }
        }
    }
}
