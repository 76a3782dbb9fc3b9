//! Signed protocol messages and certificates.
//!
//! There is no public-key cryptography here. Every node gets a secret derived
//! from the run seed, and an authenticity tag is `H(secret ‖ H(message))`.
//! The simulator hands each node a [`Signer`] for its own identity only, so a
//! tag for someone else can be produced only through a [`Forger`], which is
//! granted explicitly by [`KeyRing::grant_key_compromise`].

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::codec::{Decoder, Encoder, Truncated};
use crate::puzzle::Hash256;
use crate::slicing::{MinerId, Slice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ReplicaId(pub u32);

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Miner(MinerId),
    Replica(ReplicaId),
    /// The sequencer standing in for S's consensus.
    Sequencer,
}

impl NodeId {
    fn encode(&self, e: &mut Encoder) {
        match *self {
            NodeId::Miner(m) => e.u8(0).u32(m.0),
            NodeId::Replica(r) => e.u8(1).u32(r.0),
            NodeId::Sequencer => e.u8(2).u32(0),
        };
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let kind = d.u8()?;
        let v = d.u32()?;
        match (kind, v) {
            (0, v) => Ok(NodeId::Miner(MinerId(v))),
            (1, v) => Ok(NodeId::Replica(ReplicaId(v))),
            (2, 0) => Ok(NodeId::Sequencer),
            _ => Err(DecodeError::BadTag(kind)),
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Miner(m) => write!(f, "{m}"),
            NodeId::Replica(r) => write!(f, "{r}"),
            NodeId::Sequencer => f.write_str("seq"),
        }
    }
}

/// A mined block identified by sequence number and merge version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BlockRef {
    pub seq: u64,
    pub merge_count: u32,
}

impl BlockRef {
    pub fn new(seq: u64, merge_count: u32) -> Self {
        Self { seq, merge_count }
    }
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.seq, self.merge_count)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("input ended early")]
    Truncated,
    #[error("unknown tag {0}")]
    BadTag(u8),
    #[error("trailing bytes after a complete value")]
    Trailing,
    #[error("non-canonical encoding")]
    NonCanonical,
}

impl From<Truncated> for DecodeError {
    fn from(_: Truncated) -> Self {
        DecodeError::Truncated
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Payload {
    NonceFind {
        block: BlockRef,
        nonce: u64,
    },
    Shift {
        block: BlockRef,
        round: u32,
    },
    /// Culprits are kept sorted and distinct.
    Penalty {
        block: BlockRef,
        round: u32,
        culprits: Vec<MinerId>,
    },
    Join {
        miner: MinerId,
        stake: u64,
        seller: Option<MinerId>,
        range: Slice,
    },
    Leave {
        miner: MinerId,
        buyer: Option<MinerId>,
    },
    /// A replica's statement that `root` was committed at `seq`.
    Commit {
        seq: u64,
        root: Hash256,
    },
}

impl Payload {
    pub fn penalty(block: BlockRef, round: u32, mut culprits: Vec<MinerId>) -> Self {
        culprits.sort_unstable();
        culprits.dedup();
        Payload::Penalty { block, round, culprits }
    }

    pub(crate) fn encode_into(&self, e: &mut Encoder) {
        match self {
            Payload::NonceFind { block, nonce } => {
                e.u8(1).u64(block.seq).u32(block.merge_count).u64(*nonce);
            }
            Payload::Shift { block, round } => {
                e.u8(2).u64(block.seq).u32(block.merge_count).u32(*round);
            }
            Payload::Penalty { block, round, culprits } => {
                e.u8(3).u64(block.seq).u32(block.merge_count).u32(*round).u32(culprits.len() as u32);
                for c in culprits {
                    e.u32(c.0);
                }
            }
            Payload::Join { miner, stake, seller, range } => {
                e.u8(4).u32(miner.0).u64(*stake);
                match seller {
                    Some(s) => e.u8(1).u32(s.0),
                    None => e.u8(0),
                };
                e.u64(range.start).u64(range.end);
            }
            Payload::Leave { miner, buyer } => {
                e.u8(5).u32(miner.0);
                match buyer {
                    Some(b) => e.u8(1).u32(b.0),
                    None => e.u8(0),
                };
            }
            Payload::Commit { seq, root } => {
                e.u8(6).u64(*seq).hash(root);
            }
        }
    }

    pub(crate) fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let block = |d: &mut Decoder<'_>| -> Result<BlockRef, DecodeError> { Ok(BlockRef::new(d.u64()?, d.u32()?)) };
        let opt_miner = |d: &mut Decoder<'_>| -> Result<Option<MinerId>, DecodeError> {
            match d.u8()? {
                0 => Ok(None),
                1 => Ok(Some(MinerId(d.u32()?))),
                t => Err(DecodeError::BadTag(t)),
            }
        };
        Ok(match d.u8()? {
            1 => Payload::NonceFind { block: block(d)?, nonce: d.u64()? },
            2 => Payload::Shift { block: block(d)?, round: d.u32()? },
            3 => {
                let b = block(d)?;
                let round = d.u32()?;
                let n = d.u32()?;
                let mut culprits = Vec::new();
                for _ in 0..n {
                    culprits.push(MinerId(d.u32()?));
                }
                if culprits.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(DecodeError::NonCanonical);
                }
                Payload::Penalty { block: b, round, culprits }
            }
            4 => {
                let miner = MinerId(d.u32()?);
                let stake = d.u64()?;
                let seller = opt_miner(d)?;
                let (start, end) = (d.u64()?, d.u64()?);
                if start > end {
                    return Err(DecodeError::NonCanonical);
                }
                Payload::Join { miner, stake, seller, range: Slice::new(start, end) }
            }
            5 => Payload::Leave { miner: MinerId(d.u32()?), buyer: opt_miner(d)? },
            6 => Payload::Commit { seq: d.u64()?, root: d.hash()? },
            t => return Err(DecodeError::BadTag(t)),
        })
    }

    pub fn digest(&self) -> Hash256 {
        let mut e = Encoder::new();
        e.tag(b"poc/payload");
        self.encode_into(&mut e);
        e.digest()
    }

    /// The mined block this payload refers to, if any.
    pub fn block(&self) -> Option<BlockRef> {
        match self {
            Payload::NonceFind { block, .. } | Payload::Shift { block, .. } | Payload::Penalty { block, .. } => {
                Some(*block)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AuthTag(pub Hash256);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signed {
    pub payload: Payload,
    pub signer: NodeId,
    pub tag: AuthTag,
}

impl Signed {
    pub(crate) fn encode_into(&self, e: &mut Encoder) {
        self.payload.encode_into(e);
        self.signer.encode(e);
        e.hash(&self.tag.0);
    }

    pub(crate) fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Signed { payload: Payload::decode_from(d)?, signer: NodeId::decode(d)?, tag: AuthTag(d.hash()?) })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CertError {
    #[error("{got} distinct signers, need {need}")]
    UnderQuorum { got: usize, need: usize },
    #[error("signer {0} listed twice")]
    DuplicateSigner(MinerId),
    #[error("signer {0} is not an eligible miner")]
    Ineligible(MinerId),
    #[error("bad authenticity tag from {0}")]
    BadTag(MinerId),
}

/// `f_M + 1` (or more) matching signed messages from distinct miners.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Certificate {
    pub payload: Payload,
    /// Sorted by signer id.
    pub signers: Vec<(MinerId, AuthTag)>,
}

impl Certificate {
    /// Builds a certificate from matching votes. Votes for other payloads and
    /// repeated signers are skipped.
    pub fn assemble<'a>(payload: &Payload, votes: impl IntoIterator<Item = &'a Signed>) -> Self {
        let mut signers: Vec<(MinerId, AuthTag)> = votes
            .into_iter()
            .filter(|v| v.payload == *payload)
            .filter_map(|v| match v.signer {
                NodeId::Miner(m) => Some((m, v.tag)),
                _ => None,
            })
            .collect();
        signers.sort_unstable();
        signers.dedup_by_key(|s| s.0);
        Certificate { payload: payload.clone(), signers }
    }

    /// Checks quorum, distinctness and eligibility, plus every tag when `keys` is given.
    pub fn verify(
        &self,
        quorum: usize,
        eligible: impl Fn(MinerId) -> bool,
        keys: Option<&Verifier>,
    ) -> Result<(), CertError> {
        let mut seen = BTreeSet::new();
        for &(m, tag) in &self.signers {
            if !seen.insert(m) {
                return Err(CertError::DuplicateSigner(m));
            }
            if !eligible(m) {
                return Err(CertError::Ineligible(m));
            }
            if let Some(k) = keys {
                if !k.check(NodeId::Miner(m), &self.payload, tag) {
                    return Err(CertError::BadTag(m));
                }
            }
        }
        if seen.len() < quorum {
            return Err(CertError::UnderQuorum { got: seen.len(), need: quorum });
        }
        Ok(())
    }

    pub(crate) fn encode_into(&self, e: &mut Encoder) {
        self.payload.encode_into(e);
        e.u32(self.signers.len() as u32);
        for (m, t) in &self.signers {
            e.u32(m.0).hash(&t.0);
        }
    }

    pub(crate) fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let payload = Payload::decode_from(d)?;
        let n = d.u32()?;
        let mut signers = Vec::new();
        for _ in 0..n {
            signers.push((MinerId(d.u32()?), AuthTag(d.hash()?)));
        }
        if signers.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(DecodeError::NonCanonical);
        }
        Ok(Certificate { payload, signers })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("key compromise is only available in the long-range scenario")]
    CompromiseDisabled,
}

/// Derives every node's secret from the run seed. Held by the simulator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRing {
    root: Hash256,
    compromise_enabled: bool,
}

impl KeyRing {
    pub fn new(seed: u64) -> Self {
        Self { root: Hash256::digest_parts(&[b"poc/keyring", &seed.to_be_bytes()]), compromise_enabled: false }
    }

    /// Allows [`KeyRing::grant_key_compromise`]. Only the fork scenario calls this.
    pub fn enable_compromise(mut self) -> Self {
        self.compromise_enabled = true;
        self
    }

    fn secret(&self, node: NodeId) -> Hash256 {
        let mut e = Encoder::new();
        e.tag(b"poc/secret").hash(&self.root);
        node.encode(&mut e);
        e.digest()
    }

    /// Public identity of `node` (the key stored in the genesis record).
    pub fn public_key(&self, node: NodeId, role: &[u8]) -> Hash256 {
        Hash256::digest_parts(&[b"poc/pk", role, self.secret(node).as_bytes()])
    }

    pub fn signer(&self, node: NodeId) -> Signer {
        Signer { node, secret: self.secret(node) }
    }

    pub fn check(&self, node: NodeId, payload: &Payload, tag: AuthTag) -> bool {
        tag_for(&self.secret(node), payload) == tag
    }

    pub fn verify(&self, msg: &Signed) -> bool {
        self.check(msg.signer, &msg.payload, msg.tag)
    }

    /// A handle that checks tags but cannot sign.
    pub fn verifier(&self) -> Verifier {
        Verifier(self.clone())
    }

    /// Hands the adversary the secrets of `victims`.
    pub fn grant_key_compromise(&self, victims: &[NodeId]) -> Result<Forger, AuthError> {
        if !self.compromise_enabled {
            return Err(AuthError::CompromiseDisabled);
        }
        let mut v = victims.to_vec();
        v.sort_unstable();
        v.dedup();
        Ok(Forger { signers: v.into_iter().map(|n| self.signer(n)).collect() })
    }
}

/// Tag checking for any node. Handed to every participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verifier(KeyRing);

impl Verifier {
    pub fn check(&self, node: NodeId, payload: &Payload, tag: AuthTag) -> bool {
        self.0.check(node, payload, tag)
    }

    pub fn verify(&self, msg: &Signed) -> bool {
        self.0.verify(msg)
    }
}

fn tag_for(secret: &Hash256, payload: &Payload) -> AuthTag {
    AuthTag(Hash256::digest_parts(&[b"poc/tag", secret.as_bytes(), payload.digest().as_bytes()]))
}

/// Signing capability for one identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signer {
    node: NodeId,
    secret: Hash256,
}

impl Signer {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn sign(&self, payload: Payload) -> Signed {
        let tag = tag_for(&self.secret, &payload);
        Signed { payload, signer: self.node, tag }
    }
}

/// Signing capability for a set of compromised identities.
#[derive(Debug, Clone)]
pub struct Forger {
    signers: Vec<Signer>,
}

impl Forger {
    pub fn identities(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.signers.iter().map(|s| s.node)
    }

    /// Signs as `as_node`, or `None` if that key was not compromised.
    pub fn sign_as(&self, as_node: NodeId, payload: Payload) -> Option<Signed> {
        self.signers.iter().find(|s| s.node == as_node).map(|s| s.sign(payload))
    }
}

/// A message signed with a key that was never granted: the tag is garbage.
pub fn forge_without_key(as_node: NodeId, payload: Payload) -> Signed {
    let fake = Hash256::digest_parts(&[b"poc/guess", &[0u8; 8]]);
    Signed { tag: tag_for(&fake, &payload), payload, signer: as_node }
}
