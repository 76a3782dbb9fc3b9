//! S-blocks, mined blocks and the mined chain.
//!
//! A mined block aggregates σ contiguous committed S-blocks plus one reward
//! transaction per miner. Its aggregate root is
//! `H(root_1 ‖ … ‖ root_k ‖ reward_root)`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use thiserror::Error;

use crate::accounts::GenesisRecord;
use crate::codec::{Decoder, Encoder};
use crate::message::{BlockRef, Certificate, DecodeError, Payload, ReplicaId, Signed};
use crate::puzzle::{BlockHeader, Hash256, NonceSpace, Puzzle};
use crate::slicing::MinerId;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Transaction {
    /// Opaque client payload.
    Client {
        id: u64,
        body: Vec<u8>,
    },
    NonceFind(Certificate),
    ShiftCert(Certificate),
    PenaltyCert(Certificate),
    JoinMiner(Signed),
    LeaveMiner(Signed),
    SetDifficulty {
        difficulty: u32,
    },
}

impl Transaction {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            Transaction::Client { id, body } => {
                e.u8(1).u64(*id).bytes(body);
            }
            Transaction::NonceFind(c) => {
                e.u8(2);
                c.encode_into(&mut e);
            }
            Transaction::ShiftCert(c) => {
                e.u8(3);
                c.encode_into(&mut e);
            }
            Transaction::PenaltyCert(c) => {
                e.u8(4);
                c.encode_into(&mut e);
            }
            Transaction::JoinMiner(s) => {
                e.u8(5);
                s.encode_into(&mut e);
            }
            Transaction::LeaveMiner(s) => {
                e.u8(6);
                s.encode_into(&mut e);
            }
            Transaction::SetDifficulty { difficulty } => {
                e.u8(7).u32(*difficulty);
            }
        }
        e.finish()
    }

    /// Strict inverse of [`Transaction::encode`]: rejects trailing or
    /// non-canonical bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let tx = match d.u8()? {
            1 => Transaction::Client { id: d.u64()?, body: d.bytes()?.to_vec() },
            2 => Transaction::NonceFind(Certificate::decode_from(&mut d)?),
            3 => Transaction::ShiftCert(Certificate::decode_from(&mut d)?),
            4 => Transaction::PenaltyCert(Certificate::decode_from(&mut d)?),
            5 => Transaction::JoinMiner(Signed::decode_from(&mut d)?),
            6 => Transaction::LeaveMiner(Signed::decode_from(&mut d)?),
            7 => Transaction::SetDifficulty { difficulty: d.u32()? },
            t => return Err(DecodeError::BadTag(t)),
        };
        if !d.is_empty() {
            return Err(DecodeError::Trailing);
        }
        if tx.encode() != bytes {
            return Err(DecodeError::NonCanonical);
        }
        Ok(tx)
    }

    pub fn leaf(&self) -> Hash256 {
        Hash256::digest(&self.encode())
    }

    /// Certificates and reconfiguration go ahead of client payloads.
    pub fn is_priority(&self) -> bool {
        !matches!(self, Transaction::Client { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Transaction::Client { .. } => "client",
            Transaction::NonceFind(_) => "nonce_find",
            Transaction::ShiftCert(_) => "shift_cert",
            Transaction::PenaltyCert(_) => "penalty_cert",
            Transaction::JoinMiner(_) => "join",
            Transaction::LeaveMiner(_) => "leave",
            Transaction::SetDifficulty { .. } => "set_difficulty",
        }
    }
}

/// Credits `amount` to `miner`'s mining account when the block settles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RewardTx {
    pub miner: MinerId,
    pub amount: u64,
}

impl RewardTx {
    pub fn leaf(&self) -> Hash256 {
        let mut e = Encoder::new();
        e.tag(b"poc/reward").u32(self.miner.0).u64(self.amount);
        e.digest()
    }
}

/// Binary Merkle root. An odd last node is paired with itself; one leaf is
/// its own root; no leaves give [`Hash256::ZERO`].
pub fn merkle_root(leaves: &[Hash256]) -> Hash256 {
    if leaves.is_empty() {
        return Hash256::ZERO;
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|p| {
                let r = p.get(1).unwrap_or(&p[0]);
                Hash256::digest_parts(&[p[0].as_bytes(), r.as_bytes()])
            })
            .collect();
    }
    level[0]
}

pub fn reward_root(rewards: &[RewardTx]) -> Hash256 {
    let leaves: Vec<Hash256> = rewards.iter().map(RewardTx::leaf).collect();
    merkle_root(&leaves)
}

/// A block committed by S.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SBlock {
    pub seq: u64,
    pub merkle_root: Hash256,
    pub txns: Vec<Transaction>,
    pub proposer: ReplicaId,
}

impl SBlock {
    pub fn new(seq: u64, proposer: ReplicaId, txns: Vec<Transaction>) -> Self {
        let merkle_root = Self::compute_root(&txns);
        Self { seq, merkle_root, txns, proposer }
    }

    pub fn compute_root(txns: &[Transaction]) -> Hash256 {
        let leaves: Vec<Hash256> = txns.iter().map(Transaction::leaf).collect();
        merkle_root(&leaves)
    }

    pub fn root_is_valid(&self) -> bool {
        Self::compute_root(&self.txns) == self.merkle_root
    }

    /// Digest of the full content; copies match iff their digests match.
    pub fn digest(&self) -> Hash256 {
        let mut e = Encoder::new();
        e.tag(b"poc/sblock").u64(self.seq).u32(self.proposer.0).hash(&self.merkle_root).u32(self.txns.len() as u32);
        for t in &self.txns {
            e.bytes(&t.encode());
        }
        e.digest()
    }

    pub fn nonce_finds(&self) -> impl Iterator<Item = (&Certificate, BlockRef, u64)> {
        self.txns.iter().filter_map(|t| match t {
            Transaction::NonceFind(c) => match c.payload {
                Payload::NonceFind { block, nonce } => Some((c, block, nonce)),
                _ => None,
            },
            _ => None,
        })
    }
}

/// Nonce plus the S-block that attested it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Settlement {
    pub nonce: u64,
    pub attest_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MinedBlock {
    pub header: BlockHeader,
    pub sblocks: Vec<SBlock>,
    pub reward_txns: Vec<RewardTx>,
    pub settlement: Option<Settlement>,
}

impl MinedBlock {
    pub fn block_ref(&self) -> BlockRef {
        BlockRef::new(self.header.mined_seq, self.header.merge_count)
    }

    pub fn first_seq(&self) -> u64 {
        self.sblocks.first().map_or(0, |s| s.seq)
    }

    pub fn last_seq(&self) -> u64 {
        self.sblocks.last().map_or(0, |s| s.seq)
    }

    pub fn is_settled(&self) -> bool {
        self.settlement.is_some()
    }

    pub fn txn_count(&self) -> usize {
        self.sblocks.iter().map(|s| s.txns.len()).sum()
    }
}

pub fn aggregate_root(sblocks: &[SBlock], rewards: &[RewardTx]) -> Hash256 {
    let mut e = Encoder::new();
    for s in sblocks {
        e.hash(&s.merkle_root);
    }
    e.hash(&reward_root(rewards));
    e.digest()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("expected {want} S-blocks, got {got}")]
    WrongCount { want: usize, got: usize },
    #[error("S-block {got} does not follow {prev}")]
    NotContiguous { prev: u64, got: u64 },
    #[error("block {0} already has a nonce")]
    AlreadySettled(u64),
    #[error("next S-blocks not committed yet")]
    Deferred,
    #[error("nonce {0} does not meet the difficulty")]
    InvalidNonce(u64),
    #[error("nonce {0} is outside the nonce space")]
    NonceOutOfRange(u64),
    #[error("previous-hash mismatch")]
    PrevMismatch,
    #[error("block seq {got}, expected {want}")]
    WrongSeq { want: u64, got: u64 },
    #[error("attestation S-block {0} does not carry this nonce")]
    BadAttestation(u64),
}

fn check_contiguous(after: u64, sblocks: &[SBlock]) -> Result<(), ChainError> {
    let mut prev = after;
    for s in sblocks {
        if s.seq != prev + 1 {
            return Err(ChainError::NotContiguous { prev, got: s.seq });
        }
        prev = s.seq;
    }
    Ok(())
}

/// Builds the unsettled block that follows `prev` from exactly σ S-blocks.
pub fn aggregate(
    prev: &BlockHeader,
    prev_last_seq: u64,
    sblocks: &[SBlock],
    sigma: u32,
    reward_txns: Vec<RewardTx>,
    difficulty: u32,
) -> Result<MinedBlock, ChainError> {
    if sblocks.len() != sigma as usize {
        return Err(ChainError::WrongCount { want: sigma as usize, got: sblocks.len() });
    }
    check_contiguous(prev_last_seq, sblocks)?;
    let header = BlockHeader {
        version: prev.version,
        prev_mined_hash: prev.hash(),
        aggregate_root: aggregate_root(sblocks, &reward_txns),
        mined_seq: prev.mined_seq + 1,
        difficulty,
        merge_count: 0,
        nonce: 0,
    };
    Ok(MinedBlock { header, sblocks: sblocks.to_vec(), reward_txns, settlement: None })
}

/// Extends an unminable block with the next σ S-blocks. Same seq, same
/// rewards and difficulty, `merge_count + 1`.
pub fn merge(b: &MinedBlock, next: &[SBlock], sigma: u32) -> Result<MinedBlock, ChainError> {
    if b.is_settled() {
        return Err(ChainError::AlreadySettled(b.header.mined_seq));
    }
    if next.len() < sigma as usize {
        return Err(ChainError::Deferred);
    }
    if next.len() > sigma as usize {
        return Err(ChainError::WrongCount { want: sigma as usize, got: next.len() });
    }
    check_contiguous(b.last_seq(), next)?;
    let mut sblocks = b.sblocks.clone();
    sblocks.extend_from_slice(next);
    let header = BlockHeader {
        aggregate_root: aggregate_root(&sblocks, &b.reward_txns),
        merge_count: b.header.merge_count + 1,
        nonce: 0,
        ..b.header
    };
    Ok(MinedBlock { header, sblocks, reward_txns: b.reward_txns.clone(), settlement: None })
}

/// Genesis header: hashes the genesis record into the aggregate-root slot.
pub fn genesis_header(g: &GenesisRecord) -> BlockHeader {
    BlockHeader {
        version: g.version,
        prev_mined_hash: Hash256::ZERO,
        aggregate_root: g.hash(),
        mined_seq: 0,
        difficulty: g.difficulty,
        merge_count: 0,
        nonce: 0,
    }
}

/// The settled chain from genesis, plus committed S-blocks past the tip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedChain {
    pub genesis: GenesisRecord,
    pub blocks: Vec<MinedBlock>,
    /// S-blocks after the tip's last one, at least up to its attestation.
    pub tail: Vec<SBlock>,
}

impl MinedChain {
    pub fn new(genesis: GenesisRecord) -> Self {
        Self { genesis, blocks: Vec::new(), tail: Vec::new() }
    }

    pub fn tip_header(&self) -> BlockHeader {
        self.blocks.last().map_or_else(|| genesis_header(&self.genesis), |b| b.header)
    }

    pub fn tip_seq(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn last_sblock_seq(&self) -> u64 {
        self.blocks.last().map_or(0, MinedBlock::last_seq)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn puzzle(&self) -> Option<Puzzle> {
        Some(Puzzle::new(NonceSpace::new(self.genesis.nonce_bits).ok()?, self.genesis.pow_mode))
    }

    /// Settles `block` with `nonce`, attested by `attest`.
    pub fn append(&mut self, mut block: MinedBlock, nonce: u64, attest: &SBlock) -> Result<(), ChainError> {
        let tip = self.tip_header();
        if block.header.prev_mined_hash != tip.hash() {
            return Err(ChainError::PrevMismatch);
        }
        if block.header.mined_seq != tip.mined_seq + 1 {
            return Err(ChainError::WrongSeq { want: tip.mined_seq + 1, got: block.header.mined_seq });
        }
        let puzzle = self.puzzle().ok_or(ChainError::NonceOutOfRange(nonce))?;
        match puzzle.check(&block.header, nonce, block.header.difficulty) {
            Err(_) => return Err(ChainError::NonceOutOfRange(nonce)),
            Ok(false) => return Err(ChainError::InvalidNonce(nonce)),
            Ok(true) => {}
        }
        let r = block.block_ref();
        if attest.seq <= block.last_seq() || !attest.nonce_finds().any(|(_, b, n)| b == r && n == nonce) {
            return Err(ChainError::BadAttestation(attest.seq));
        }
        block.header.nonce = nonce;
        block.settlement = Some(Settlement { nonce, attest_seq: attest.seq });
        self.tail.retain(|s| s.seq > block.last_seq());
        self.blocks.push(block);
        Ok(())
    }

    /// Records a committed S-block that is not yet in any settled block.
    pub fn push_tail(&mut self, s: SBlock) {
        if s.seq > self.last_sblock_seq() && !self.tail.iter().any(|t| t.seq == s.seq) {
            self.tail.push(s);
        }
    }

    /// Trims the tail to what verification needs: up to the tip's attestation.
    pub fn trimmed(&self) -> Self {
        let keep = self.blocks.last().and_then(|b| b.settlement).map_or(0, |s| s.attest_seq);
        let mut c = self.clone();
        c.tail.retain(|s| s.seq <= keep);
        c
    }
}

/// Where and why verification failed. `block` is the mined seq (0 = genesis).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("block {block}: {kind}")]
pub struct AuditFailure {
    pub block: u64,
    pub kind: AuditKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditKind {
    #[error("genesis record is malformed: {0}")]
    Genesis(&'static str),
    #[error("version {0} differs from genesis")]
    Version(u32),
    #[error("previous-hash linkage broken")]
    Linkage,
    #[error("mined seq out of order")]
    SeqGap,
    #[error("S-block {0} out of sequence")]
    SBlockGap(u64),
    #[error("merkle root mismatch in S-block {0}")]
    MerkleRoot(u64),
    #[error("S-block {0} names the wrong proposer")]
    Proposer(u64),
    #[error("holds {got} S-blocks, merge count implies {want}")]
    MergeCount { want: usize, got: usize },
    #[error("merge {0} has no committed shift certificate at the last round")]
    MergeUnjustified(u32),
    #[error("aggregate root mismatch")]
    AggregateRoot,
    #[error("difficulty {got}, expected {want}")]
    Difficulty { want: u32, got: u32 },
    #[error("nonce out of range")]
    NonceOutOfRange,
    #[error("nonce fails the difficulty check")]
    InvalidNonce,
    #[error("block is not settled")]
    Unsettled,
    #[error("no matching attested NonceFind")]
    Attestation,
    #[error("more than one NonceFind committed for this block")]
    DuplicateNonceFind,
    #[error("certificate below quorum in S-block {0}")]
    Quorum(u64),
    #[error("reward transactions malformed")]
    Rewards,
    #[error("tail is missing the attestation S-block")]
    ShortTail,
}

/// Counts from a successful audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AuditSummary {
    pub blocks: u64,
    pub sblocks: u64,
    pub transactions: u64,
}

/// Full audit from genesis to tip: linkage, seq ranges, Merkle and aggregate
/// roots, proposers, difficulty, merges, attestations, nonces and rewards.
pub fn verify_chain(chain: &MinedChain) -> Result<AuditSummary, AuditFailure> {
    let g = &chain.genesis;
    let fail = |block: u64, kind: AuditKind| AuditFailure { block, kind };
    if g.sigma == 0 {
        return Err(fail(0, AuditKind::Genesis("sigma is zero")));
    }
    if g.n_replicas == 0 {
        return Err(fail(0, AuditKind::Genesis("no replicas")));
    }
    let puzzle = chain.puzzle().ok_or_else(|| fail(0, AuditKind::Genesis("bad nonce width")))?;
    g.table().map_err(|_| fail(0, AuditKind::Genesis("slices do not partition the nonce space")))?;
    let quorum = g.f_miners as usize + 1;

    // every S-block in order, tagged with the mined block holding it
    let mut all: Vec<(&SBlock, u64)> = Vec::new();
    for b in &chain.blocks {
        all.extend(b.sblocks.iter().map(|s| (s, b.header.mined_seq)));
    }
    let tip = chain.blocks.len() as u64;
    all.extend(chain.tail.iter().map(|s| (s, tip + 1)));
    for (i, (s, owner)) in all.iter().enumerate() {
        if s.seq != i as u64 + 1 {
            return Err(fail(*owner, AuditKind::SBlockGap(s.seq)));
        }
        if !s.root_is_valid() {
            return Err(fail(*owner, AuditKind::MerkleRoot(s.seq)));
        }
        if s.proposer.0 as u64 != (s.seq - 1) % g.n_replicas as u64 {
            return Err(fail(*owner, AuditKind::Proposer(s.seq)));
        }
        for t in &s.txns {
            if let Transaction::NonceFind(c) | Transaction::ShiftCert(c) | Transaction::PenaltyCert(c) = t {
                if c.verify(quorum, |_| true, None).is_err() {
                    return Err(fail(*owner, AuditKind::Quorum(s.seq)));
                }
            }
        }
    }
    let sblock = |seq: u64| -> Option<&SBlock> { all.get((seq as usize).checked_sub(1)?).map(|p| p.0) };

    // difficulty in force after each S-block
    let mut difficulty_at = Vec::with_capacity(all.len() + 1);
    let mut d = g.difficulty;
    difficulty_at.push(d);
    for (s, _) in &all {
        for t in &s.txns {
            if let Transaction::SetDifficulty { difficulty } = t {
                d = *difficulty;
            }
        }
        difficulty_at.push(d);
    }

    // NonceFind and last-round shift certificates per mined seq
    let mut finds: BTreeMap<u64, Vec<(u64, BlockRef, u64)>> = BTreeMap::new();
    let mut merges: BTreeMap<BlockRef, u64> = BTreeMap::new();
    for (s, _) in &all {
        for (_, r, n) in s.nonce_finds() {
            finds.entry(r.seq).or_default().push((s.seq, r, n));
        }
        for t in &s.txns {
            if let Transaction::ShiftCert(c) = t {
                if let Payload::Shift { block, round } = c.payload {
                    if round == g.f_miners {
                        merges.entry(block).or_insert(s.seq);
                    }
                }
            }
        }
    }

    let mut prev = genesis_header(g);
    let mut prev_last = 0u64;
    let mut prev_attest = 0u64;
    for b in &chain.blocks {
        let h = &b.header;
        let seq = h.mined_seq;
        if h.version != g.version {
            return Err(fail(seq, AuditKind::Version(h.version)));
        }
        if seq != prev.mined_seq + 1 {
            return Err(fail(seq, AuditKind::SeqGap));
        }
        if h.prev_mined_hash != prev.hash() {
            return Err(fail(seq, AuditKind::Linkage));
        }
        let want = g.sigma as usize * (h.merge_count as usize + 1);
        if b.sblocks.len() != want {
            return Err(fail(seq, AuditKind::MergeCount { want, got: b.sblocks.len() }));
        }
        if b.first_seq() != prev_last + 1 {
            return Err(fail(seq, AuditKind::SBlockGap(b.first_seq())));
        }
        for v in 0..h.merge_count {
            if !merges.contains_key(&BlockRef::new(seq, v)) {
                return Err(fail(seq, AuditKind::MergeUnjustified(v)));
            }
        }
        let mut ids: Vec<MinerId> = b.reward_txns.iter().map(|r| r.miner).collect();
        ids.dedup();
        let sum = b.reward_txns.iter().try_fold(0u64, |a, r| a.checked_add(r.amount));
        if ids.len() != b.reward_txns.len()
            || ids.windows(2).any(|w| w[0] >= w[1])
            || b.reward_txns.is_empty()
            || sum != Some(g.block_reward)
        {
            return Err(fail(seq, AuditKind::Rewards));
        }
        if h.aggregate_root != aggregate_root(&b.sblocks, &b.reward_txns) {
            return Err(fail(seq, AuditKind::AggregateRoot));
        }
        let created_after = prev_attest.max(b.first_seq() + g.sigma as u64 - 1);
        let want_d = difficulty_at[created_after as usize];
        if h.difficulty != want_d {
            return Err(fail(seq, AuditKind::Difficulty { want: want_d, got: h.difficulty }));
        }
        let st = b.settlement.ok_or_else(|| fail(seq, AuditKind::Unsettled))?;
        if st.nonce != h.nonce {
            return Err(fail(seq, AuditKind::Attestation));
        }
        match puzzle.check(h, h.nonce, h.difficulty) {
            Err(_) => return Err(fail(seq, AuditKind::NonceOutOfRange)),
            Ok(false) => return Err(fail(seq, AuditKind::InvalidNonce)),
            Ok(true) => {}
        }
        let attest = sblock(st.attest_seq).ok_or_else(|| fail(seq, AuditKind::ShortTail))?;
        let r = b.block_ref();
        if st.attest_seq <= b.last_seq() || !attest.nonce_finds().any(|(_, br, n)| br == r && n == h.nonce) {
            return Err(fail(seq, AuditKind::Attestation));
        }
        if finds.get(&seq).map_or(0, Vec::len) != 1 {
            return Err(fail(seq, AuditKind::DuplicateNonceFind));
        }
        prev = *h;
        prev_last = b.last_seq();
        prev_attest = st.attest_seq;
    }
    Ok(AuditSummary {
        blocks: chain.blocks.len() as u64,
        sblocks: all.len() as u64,
        transactions: all.iter().map(|(s, _)| s.txns.len() as u64).sum(),
    })
}
