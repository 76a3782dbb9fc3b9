//! Mined-block header encoding and the hash puzzle.
//!
//! The header is a fixed 92-byte big-endian record. A nonce is valid at
//! difficulty `D` when the SHA-256 digest of the header (with that nonce)
//! starts with at least `D` zero bits.

use core::fmt;
use core::sync::atomic::{AtomicBool, Ordering};

use sha2::block_api::compress256;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::slicing::Slice;

/// Serialized header length in bytes.
pub const HEADER_LEN: usize = 92;
/// Largest meaningful difficulty (bits in a SHA-256 digest).
pub const MAX_DIFFICULTY: u32 = 256;
/// Cancellation is polled at least this often during a live search.
pub const CANCEL_CHECK_INTERVAL: u64 = 1 << 12;

const NONCE_OFFSET: usize = 84;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PuzzleError {
    #[error("nonce {nonce} outside a {bits}-bit nonce space")]
    NonceOutOfRange { nonce: u64, bits: u8 },
    #[error("nonce width must be 1..=63 bits, got {0}")]
    BadNonceWidth(u8),
    #[error("search budget must allow at least one attempt")]
    EmptyBudget,
}

/// A 32-byte digest. Ordered lexicographically by byte.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash256(pub [u8; 32]);

impl Hash256 {
    pub const ZERO: Self = Self([0; 32]);

    pub fn digest(data: &[u8]) -> Self {
        Self(Sha256::digest(data).into())
    }

    pub fn digest_parts(parts: &[&[u8]]) -> Self {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p);
        }
        Self(h.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn leading_zero_bits(&self) -> u32 {
        leading_zero_bits(self)
    }

    /// Parses exactly 64 lowercase hex characters.
    pub fn from_hex(s: &str) -> Option<Self> {
        let b = s.as_bytes();
        if b.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, pair) in b.chunks_exact(2).enumerate() {
            out[i] = (hex_val(pair[0])? << 4) | hex_val(pair[1])?;
        }
        Some(Self(out))
    }
}

fn hex_val(c: u8) -> Option<u8> {
    match c {
        b'0'..=b'9' => Some(c - b'0'),
        b'a'..=b'f' => Some(c - b'a' + 10),
        _ => None,
    }
}

impl fmt::Display for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash256({self})")
    }
}

/// Count of consecutive zero bits from the most significant bit of byte 0.
pub fn leading_zero_bits(d: &Hash256) -> u32 {
    let mut n = 0;
    for &b in &d.0 {
        if b == 0 {
            n += 8;
        } else {
            return n + b.leading_zeros();
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHeader {
    pub version: u32,
    pub prev_mined_hash: Hash256,
    pub aggregate_root: Hash256,
    pub mined_seq: u64,
    pub difficulty: u32,
    pub merge_count: u32,
    pub nonce: u64,
}

impl BlockHeader {
    /// `version ‖ prev ‖ root ‖ seq ‖ difficulty ‖ merge_count ‖ nonce`, big-endian.
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.version.to_be_bytes());
        out[4..36].copy_from_slice(&self.prev_mined_hash.0);
        out[36..68].copy_from_slice(&self.aggregate_root.0);
        out[68..76].copy_from_slice(&self.mined_seq.to_be_bytes());
        out[76..80].copy_from_slice(&self.difficulty.to_be_bytes());
        out[80..84].copy_from_slice(&self.merge_count.to_be_bytes());
        out[NONCE_OFFSET..].copy_from_slice(&self.nonce.to_be_bytes());
        out
    }

    /// Inverse of [`BlockHeader::to_bytes`]. `None` unless exactly 92 bytes.
    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != HEADER_LEN {
            return None;
        }
        let u32_at = |i: usize| u32::from_be_bytes(b[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_be_bytes(b[i..i + 8].try_into().unwrap());
        let h_at = |i: usize| Hash256(b[i..i + 32].try_into().unwrap());
        Some(Self {
            version: u32_at(0),
            prev_mined_hash: h_at(4),
            aggregate_root: h_at(36),
            mined_seq: u64_at(68),
            difficulty: u32_at(76),
            merge_count: u32_at(80),
            nonce: u64_at(NONCE_OFFSET),
        })
    }

    pub fn hash(&self) -> Hash256 {
        Hash256::digest(&self.to_bytes())
    }

    pub fn with_nonce(&self, nonce: u64) -> Self {
        Self { nonce, ..*self }
    }
}

/// Serializes a header into its frozen 92-byte wire form.
pub fn serialize_header(h: &BlockHeader) -> [u8; HEADER_LEN] {
    h.to_bytes()
}

/// The set of nonces `[0, 2^bits)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NonceSpace {
    bits: u8,
}

impl NonceSpace {
    pub fn new(bits: u8) -> Result<Self, PuzzleError> {
        if (1..=63).contains(&bits) {
            Ok(Self { bits })
        } else {
            Err(PuzzleError::BadNonceWidth(bits))
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn size(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn contains(&self, nonce: u64) -> bool {
        nonce < self.size()
    }

    pub fn full(&self) -> Slice {
        Slice::new(0, self.size())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchBudget {
    Unbounded,
    Bounded(u64),
}

impl SearchBudget {
    pub fn bounded(max_attempts: u64) -> Result<Self, PuzzleError> {
        if max_attempts == 0 {
            Err(PuzzleError::EmptyBudget)
        } else {
            Ok(Self::Bounded(max_attempts))
        }
    }

    fn limit(&self) -> u64 {
        match *self {
            Self::Unbounded => u64::MAX,
            Self::Bounded(n) => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOutcome {
    pub nonce: Option<u64>,
    pub attempts: u64,
}

/// How nonce validity is decided.
///
/// `Sha256` hashes the real header. `Modeled` replaces SHA-256 with a cheap
/// keyed 64-bit mixer so that large spaces can be simulated by attempt
/// counting; it keeps the same protocol path and is only as strong as a
/// simulation needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PowMode {
    Sha256,
    Modeled,
}

impl PowMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Sha256 => "sha256",
            Self::Modeled => "modeled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sha256" | "real" | "real-hash" => Some(Self::Sha256),
            "modeled" => Some(Self::Modeled),
            _ => None,
        }
    }
}

/// Nonce checker for a fixed space and hash mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Puzzle {
    pub space: NonceSpace,
    pub mode: PowMode,
}

impl Puzzle {
    pub fn new(space: NonceSpace, mode: PowMode) -> Self {
        Self { space, mode }
    }

    pub fn check(&self, h: &BlockHeader, nonce: u64, difficulty: u32) -> Result<bool, PuzzleError> {
        if !self.space.contains(nonce) {
            return Err(PuzzleError::NonceOutOfRange { nonce, bits: self.space.bits });
        }
        Ok(match self.mode {
            PowMode::Sha256 => h.with_nonce(nonce).hash().leading_zero_bits() >= difficulty,
            PowMode::Modeled => Modeled::new(h).leading_zeros(nonce) >= difficulty,
        })
    }

    pub fn search(&self, h: &BlockHeader, s: Slice, difficulty: u32, budget: SearchBudget) -> SearchOutcome {
        self.search_inner(h, s, difficulty, budget, None)
    }

    /// Like [`Puzzle::search`], polling `cancel` every [`CANCEL_CHECK_INTERVAL`] attempts.
    pub fn search_cancellable(
        &self,
        h: &BlockHeader,
        s: Slice,
        difficulty: u32,
        budget: SearchBudget,
        cancel: &AtomicBool,
    ) -> SearchOutcome {
        self.search_inner(h, s, difficulty, budget, Some(cancel))
    }

    fn search_inner(
        &self,
        h: &BlockHeader,
        s: Slice,
        difficulty: u32,
        budget: SearchBudget,
        cancel: Option<&AtomicBool>,
    ) -> SearchOutcome {
        debug_assert!(s.end <= self.space.size());
        match self.mode {
            PowMode::Sha256 => {
                let hasher = MidstateHasher::new(h);
                scan(s, budget, cancel, |n| hasher.leading_zeros(n) >= difficulty)
            }
            PowMode::Modeled => {
                let m = Modeled::new(h);
                scan(s, budget, cancel, |n| m.leading_zeros(n) >= difficulty)
            }
        }
    }
}

fn scan(
    s: Slice,
    budget: SearchBudget,
    cancel: Option<&AtomicBool>,
    mut valid: impl FnMut(u64) -> bool,
) -> SearchOutcome {
    let limit = s.len().min(budget.limit());
    let mut attempts = 0;
    while attempts < limit {
        if let Some(c) = cancel {
            if attempts % CANCEL_CHECK_INTERVAL == 0 && c.load(Ordering::Relaxed) {
                break;
            }
        }
        let n = s.start + attempts;
        attempts += 1;
        if valid(n) {
            return SearchOutcome { nonce: Some(n), attempts };
        }
    }
    SearchOutcome { nonce: None, attempts }
}

/// True iff `H(serialize_header(h with nonce))` has at least `d` leading zero bits.
pub fn check_nonce(h: &BlockHeader, nonce: u64, d: u32, space: NonceSpace) -> Result<bool, PuzzleError> {
    Puzzle::new(space, PowMode::Sha256).check(h, nonce, d)
}

/// Ascending SHA-256 scan of `s` returning the first valid nonce.
pub fn search_slice(h: &BlockHeader, s: Slice, d: u32, budget: SearchBudget) -> SearchOutcome {
    let hasher = MidstateHasher::new(h);
    scan(s, budget, None, |n| hasher.leading_zeros(n) >= d)
}

const SHA256_IV: [u32; 8] =
    [0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19];

/// SHA-256 with the first 64 header bytes pre-compressed. The nonce sits in
/// the second block, so each attempt costs one compression.
struct MidstateHasher {
    mid: [u32; 8],
    tail: [u8; 64],
}

impl MidstateHasher {
    fn new(h: &BlockHeader) -> Self {
        let bytes = h.to_bytes();
        let mut mid = SHA256_IV;
        let mut first = [0u8; 64];
        first.copy_from_slice(&bytes[..64]);
        compress256(&mut mid, &[first]);
        let mut tail = [0u8; 64];
        tail[..HEADER_LEN - 64].copy_from_slice(&bytes[64..]);
        tail[HEADER_LEN - 64] = 0x80;
        tail[56..].copy_from_slice(&((HEADER_LEN as u64) * 8).to_be_bytes());
        Self { mid, tail }
    }

    fn leading_zeros(&self, nonce: u64) -> u32 {
        let mut block = self.tail;
        block[NONCE_OFFSET - 64..HEADER_LEN - 64].copy_from_slice(&nonce.to_be_bytes());
        let mut state = self.mid;
        compress256(&mut state, &[block]);
        let mut n = 0;
        for w in state {
            if w == 0 {
                n += 32;
            } else {
                return n + w.leading_zeros();
            }
        }
        n
    }
}

/// Keyed mixer standing in for SHA-256 in modeled mode.
struct Modeled {
    key: u64,
}

impl Modeled {
    fn new(h: &BlockHeader) -> Self {
        let d = h.with_nonce(0).hash();
        let mut k = [0u8; 8];
        k.copy_from_slice(&d.0[..8]);
        Self { key: u64::from_be_bytes(k) }
    }

    fn leading_zeros(&self, nonce: u64) -> u32 {
        // splitmix64 finalizer
        let mut z = self.key ^ nonce.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        z.leading_zeros()
    }
}
