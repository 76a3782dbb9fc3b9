//! The simulated system S: replicas that gossip committed S-blocks and
//! collect attestations, plus a sequencer that stands in for consensus.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::{SBlock, Transaction};
use crate::ledger::{Ledger, LedgerEvent};
pub use crate::message::ReplicaId;
use crate::message::{Certificate, NodeId, Payload, Signed, Verifier};
use crate::slicing::MinerId;
use crate::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemConfig {
    pub n_replicas: u32,
    pub f_replicas: u32,
    pub n_miners: u32,
    pub f_miners: u32,
    pub sigma: u32,
    pub commit_interval: SimTime,
    pub txns_per_block: u32,
    pub difficulty: u32,
    pub nonce_bits: u8,
    /// Miner timer; `None` picks four times the largest slice search.
    pub delta: Option<SimTime>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            n_replicas: 4,
            f_replicas: 1,
            n_miners: 4,
            f_miners: 1,
            sigma: 1,
            commit_interval: 2_000,
            txns_per_block: 4,
            difficulty: 10,
            nonce_bits: 42,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("n_replicas = {n} needs to be at least 3*f_replicas+1 = {need}")]
    Replicas { n: u32, need: u32 },
    #[error("n_miners = {n} needs to be at least 2*f_miners+1 = {need}")]
    Miners { n: u32, need: u32 },
    #[error("sigma must be at least 1")]
    Sigma,
    #[error("commit_interval must be positive")]
    CommitInterval,
    #[error("nonce_bits must be in 1..=63, got {0}")]
    NonceBits(u8),
    #[error("{0} miners cannot split a 2^{1} nonce space")]
    TooManyMiners(u32, u8),
    #[error("timer delta must be positive")]
    Delta,
    #[error("{0}")]
    Other(&'static str),
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let need = 3 * self.f_replicas + 1;
        if self.n_replicas < need {
            return Err(ConfigError::Replicas { n: self.n_replicas, need });
        }
        let need = 2 * self.f_miners + 1;
        if self.n_miners < need {
            return Err(ConfigError::Miners { n: self.n_miners, need });
        }
        if self.sigma == 0 {
            return Err(ConfigError::Sigma);
        }
        if self.commit_interval == 0 {
            return Err(ConfigError::CommitInterval);
        }
        if !(1..=63).contains(&self.nonce_bits) {
            return Err(ConfigError::NonceBits(self.nonce_bits));
        }
        if self.n_miners as u64 > 1u64 << self.nonce_bits {
            return Err(ConfigError::TooManyMiners(self.n_miners, self.nonce_bits));
        }
        if self.delta == Some(0) {
            return Err(ConfigError::Delta);
        }
        Ok(())
    }
}

/// How an equivocating replica alters the copies it gossips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionRule {
    /// Flip a byte of the first client payload.
    TamperClient,
    /// Drop every priority transaction.
    StripPriority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReplicaBehavior {
    #[default]
    Honest,
    Equivocator(CorruptionRule),
    Mute,
}

impl ReplicaBehavior {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "honest" => Some(Self::Honest),
            "equivocator" | "equivocator-tamper" => Some(Self::Equivocator(CorruptionRule::TamperClient)),
            "equivocator-strip" => Some(Self::Equivocator(CorruptionRule::StripPriority)),
            "mute" => Some(Self::Mute),
            _ => None,
        }
    }
}

impl fmt::Display for ReplicaBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Honest => "honest",
            Self::Equivocator(CorruptionRule::TamperClient) => "equivocator-tamper",
            Self::Equivocator(CorruptionRule::StripPriority) => "equivocator-strip",
            Self::Mute => "mute",
        })
    }
}

/// What miners (and operators) hand to replicas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Submission {
    NonceFind(Signed),
    ShiftCert(Certificate),
    PenaltyCert(Certificate),
    Join(Signed),
    Leave(Signed),
    SetDifficulty(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replica {
    id: ReplicaId,
    behavior: ReplicaBehavior,
    quorum: usize,
    nonce_votes: BTreeMap<Payload, BTreeMap<MinerId, Signed>>,
    forwarded: BTreeSet<Payload>,
}

impl Replica {
    pub fn new(id: ReplicaId, behavior: ReplicaBehavior, f_miners: u32) -> Self {
        Self { id, behavior, quorum: f_miners as usize + 1, nonce_votes: BTreeMap::new(), forwarded: BTreeSet::new() }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn behavior(&self) -> ReplicaBehavior {
        self.behavior
    }

    /// Turns a submission into a transaction for the sequencer, once it is
    /// attested. NonceFinds need `f_M + 1` matching copies per nonce value.
    pub fn on_submission(&mut self, sub: Submission, verifier: &Verifier) -> Option<Transaction> {
        if self.behavior == ReplicaBehavior::Mute {
            return None;
        }
        match sub {
            Submission::NonceFind(s) => {
                let NodeId::Miner(m) = s.signer else { return None };
                if !matches!(s.payload, Payload::NonceFind { .. }) || !verifier.verify(&s) {
                    return None;
                }
                if self.forwarded.contains(&s.payload) {
                    return None;
                }
                let payload = s.payload.clone();
                let votes = self.nonce_votes.entry(payload.clone()).or_default();
                votes.insert(m, s);
                if votes.len() < self.quorum {
                    return None;
                }
                let votes = self.nonce_votes.remove(&payload).unwrap();
                self.forwarded.insert(payload.clone());
                Some(Transaction::NonceFind(Certificate::assemble(&payload, votes.values())))
            }
            Submission::ShiftCert(c) | Submission::PenaltyCert(c) => {
                let ok = matches!(c.payload, Payload::Shift { .. } | Payload::Penalty { .. })
                    && c.verify(self.quorum, |_| true, Some(verifier)).is_ok();
                if !ok || !self.forwarded.insert(c.payload.clone()) {
                    return None;
                }
                Some(match c.payload {
                    Payload::Shift { .. } => Transaction::ShiftCert(c),
                    _ => Transaction::PenaltyCert(c),
                })
            }
            Submission::Join(s) => verifier.verify(&s).then_some(Transaction::JoinMiner(s)),
            Submission::Leave(s) => verifier.verify(&s).then_some(Transaction::LeaveMiner(s)),
            Submission::SetDifficulty(d) => Some(Transaction::SetDifficulty { difficulty: d }),
        }
    }

    /// Drops bookkeeping for mined blocks up to `settled_seq`.
    pub fn prune(&mut self, settled_seq: u64) {
        let old = |p: &Payload| p.block().is_some_and(|b| b.seq <= settled_seq);
        self.nonce_votes.retain(|p, _| !old(p));
        self.forwarded.retain(|p| !old(p) || matches!(p, Payload::Penalty { .. }));
    }

    /// The copy this replica gossips, if any.
    pub fn copy_for(&self, sb: &SBlock) -> Option<SBlock> {
        match self.behavior {
            ReplicaBehavior::Honest => Some(sb.clone()),
            ReplicaBehavior::Mute => None,
            ReplicaBehavior::Equivocator(rule) => Some(corrupt(sb, rule)),
        }
    }
}

/// A well-formed but different S-block: the merkle root is recomputed, so
/// only the copy count exposes it.
pub fn corrupt(sb: &SBlock, rule: CorruptionRule) -> SBlock {
    let mut txns = sb.txns.clone();
    let stripped = rule == CorruptionRule::StripPriority && txns.iter().any(Transaction::is_priority);
    if stripped {
        txns.retain(|t| !t.is_priority());
    } else {
        match txns.iter_mut().find_map(|t| match t {
            Transaction::Client { body, .. } => Some(body),
            _ => None,
        }) {
            Some(body) if !body.is_empty() => body[0] ^= 0xff,
            Some(body) => body.push(0xee),
            None => txns.push(Transaction::Client { id: u64::MAX, body: vec![0xee] }),
        }
    }
    SBlock::new(sb.seq, sb.proposer, txns)
}

/// Orders attested transactions into S-blocks.
///
/// It keeps its own [`Ledger`] over what it committed, which is how it knows
/// which NonceFind, shift and penalty transactions are still current.
#[derive(Debug, Clone)]
pub struct Sequencer {
    n_replicas: u32,
    txns_per_block: u32,
    view: Ledger,
    verifier: Verifier,
    lane: Vec<Transaction>,
    next_client: u64,
    rng: ChaCha8Rng,
}

impl Sequencer {
    pub fn new(cfg: &SystemConfig, view: Ledger, verifier: Verifier, rng: ChaCha8Rng) -> Self {
        Self {
            n_replicas: cfg.n_replicas,
            txns_per_block: cfg.txns_per_block,
            view,
            verifier,
            lane: Vec::new(),
            next_client: 0,
            rng,
        }
    }

    pub fn view(&self) -> &Ledger {
        &self.view
    }

    pub fn next_seq(&self) -> u64 {
        self.view.processed() + 1
    }

    pub fn pending(&self) -> usize {
        self.lane.len()
    }

    pub fn submit(&mut self, tx: Transaction) {
        if !self.lane.contains(&tx) {
            self.lane.push(tx);
        }
    }

    /// Commits the next S-block and returns it with the view's events.
    pub fn produce(&mut self) -> (SBlock, Vec<LedgerEvent>) {
        let seq = self.next_seq();
        let v = Some(&self.verifier);
        let mut take = vec![false; self.lane.len()];

        // lowest valid nonce wins
        let best = self
            .lane
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match t {
                Transaction::NonceFind(c) if self.view.nonce_find_ok(c, v) => match c.payload {
                    Payload::NonceFind { nonce, .. } => Some((nonce, i)),
                    _ => None,
                },
                _ => None,
            })
            .min();
        if let Some((_, i)) = best {
            take[i] = true;
        } else if let Some(i) =
            self.lane.iter().position(|t| matches!(t, Transaction::ShiftCert(c) if self.view.shift_ok(c, v)))
        {
            take[i] = true;
        }
        let mut penalized = BTreeSet::new();
        for (i, t) in self.lane.iter().enumerate() {
            match t {
                Transaction::PenaltyCert(c) if self.view.penalty_ok(c, v) => {
                    if c.payload.block().is_some_and(|b| penalized.insert(b.seq)) {
                        take[i] = true;
                    }
                }
                Transaction::JoinMiner(_) | Transaction::LeaveMiner(_) | Transaction::SetDifficulty { .. } => {
                    take[i] = true
                }
                _ => {}
            }
        }

        let mut txns = Vec::new();
        for (t, keep) in core::mem::take(&mut self.lane).into_iter().zip(take) {
            if keep {
                txns.push(t);
            } else if let Transaction::ShiftCert(c) = &t {
                // a certificate for a later round of the current block stays queued
                let later = matches!((&c.payload, self.view.current()), (Payload::Shift { block, round }, Some(w))
                    if *block == w.block_ref() && *round > w.round);
                if later {
                    self.lane.push(t);
                }
            }
        }
        while txns.len() < self.txns_per_block as usize {
            let mut body = vec![0u8; 16];
            self.rng.fill_bytes(&mut body);
            txns.push(Transaction::Client { id: self.next_client, body });
            self.next_client += 1;
        }
        let proposer = ReplicaId(((seq - 1) % self.n_replicas as u64) as u32);
        let sb = SBlock::new(seq, proposer, txns);
        let events = self.view.apply(&sb, v).expect("sequencer output is well-formed");
        (sb, events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounts::{init_genesis, AccountParams, GenesisParams};
    use crate::message::{BlockRef, KeyRing};
    use crate::netsim::rng_stream;
    use crate::puzzle::{NonceSpace, PowMode, SearchBudget};
    use crate::slicing::PenaltyRule;

    fn setup(n_miners: u32, f_miners: u32) -> (KeyRing, Sequencer) {
        let keys = KeyRing::new(3);
        let stakes: Vec<_> = (0..n_miners).map(|i| (MinerId(i), 100)).collect();
        let g = GenesisParams {
            version: 1,
            space: NonceSpace::new(12).unwrap(),
            pow_mode: PowMode::Sha256,
            difficulty: 4,
            sigma: 1,
            n_replicas: 4,
            f_miners,
        };
        let (rec, db, _) = init_genesis(&stakes, &keys, AccountParams::default(), g).unwrap();
        let view = Ledger::new(rec, db, PenaltyRule::Holders).unwrap();
        let cfg = SystemConfig { n_miners, f_miners, nonce_bits: 12, difficulty: 4, ..Default::default() };
        let v = keys.verifier();
        (keys, Sequencer::new(&cfg, view, v, rng_stream(3, "clients")))
    }

    fn signed(keys: &KeyRing, m: u32, p: Payload) -> Signed {
        keys.signer(NodeId::Miner(MinerId(m))).sign(p)
    }

    fn valid_nonces(seqr: &Sequencer, k: usize) -> Vec<u64> {
        let w = seqr.view().current().unwrap();
        let p = seqr.view().puzzle();
        let mut out = Vec::new();
        let mut start = 0;
        while out.len() < k {
            let o = p.search(&w.block.header, crate::slicing::Slice::new(start, 4096), 4, SearchBudget::Unbounded);
            let n = o.nonce.unwrap();
            out.push(n);
            start = n + 1;
        }
        out
    }

    #[test]
    fn config_bounds() {
        assert!(SystemConfig::default().validate().is_ok());
        let c = SystemConfig { n_replicas: 3, ..Default::default() };
        assert_eq!(c.validate(), Err(ConfigError::Replicas { n: 3, need: 4 }));
        let c = SystemConfig { n_miners: 4, f_miners: 2, ..Default::default() };
        assert_eq!(c.validate(), Err(ConfigError::Miners { n: 4, need: 5 }));
        assert_eq!(SystemConfig { sigma: 0, ..Default::default() }.validate(), Err(ConfigError::Sigma));
    }

    #[test]
    fn replica_needs_quorum_per_nonce_value() {
        let keys = KeyRing::new(3);
        let v = keys.verifier();
        let mut r = Replica::new(ReplicaId(0), ReplicaBehavior::Honest, 1);
        let p = Payload::NonceFind { block: BlockRef::new(1, 0), nonce: 9 };
        let q = Payload::NonceFind { block: BlockRef::new(1, 0), nonce: 10 };
        assert_eq!(r.on_submission(Submission::NonceFind(signed(&keys, 0, p.clone())), &v), None);
        assert_eq!(r.on_submission(Submission::NonceFind(signed(&keys, 1, q)), &v), None);
        // the same miner twice is one vote
        assert_eq!(r.on_submission(Submission::NonceFind(signed(&keys, 0, p.clone())), &v), None);
        let tx = r.on_submission(Submission::NonceFind(signed(&keys, 2, p.clone())), &v).unwrap();
        let Transaction::NonceFind(c) = tx else { panic!() };
        assert_eq!(c.signers.len(), 2);
        // forwarded once
        assert_eq!(r.on_submission(Submission::NonceFind(signed(&keys, 3, p)), &v), None);
    }

    #[test]
    fn replica_rejects_bad_tags_and_mute_forwards_nothing() {
        let keys = KeyRing::new(3);
        let v = keys.verifier();
        let p = Payload::Shift { block: BlockRef::new(1, 0), round: 0 };
        let votes = [signed(&keys, 0, p.clone()), signed(&keys, 1, p.clone())];
        let c = Certificate::assemble(&p, votes.iter());
        let mut bad = c.clone();
        bad.signers[0].1 = crate::message::AuthTag(crate::puzzle::Hash256::ZERO);
        let mut r = Replica::new(ReplicaId(0), ReplicaBehavior::Honest, 1);
        assert_eq!(r.on_submission(Submission::ShiftCert(bad), &v), None);
        assert!(r.on_submission(Submission::ShiftCert(c.clone()), &v).is_some());
        assert_eq!(r.on_submission(Submission::ShiftCert(c.clone()), &v), None);
        let mut m = Replica::new(ReplicaId(1), ReplicaBehavior::Mute, 1);
        assert_eq!(m.on_submission(Submission::ShiftCert(c), &v), None);
        assert_eq!(m.copy_for(&SBlock::new(1, ReplicaId(0), vec![])), None);
    }

    #[test]
    fn equivocated_copies_differ_but_stay_well_formed() {
        let sb = SBlock::new(4, ReplicaId(3), vec![Transaction::Client { id: 1, body: vec![1, 2] }]);
        for rule in [CorruptionRule::TamperClient, CorruptionRule::StripPriority] {
            let c = corrupt(&sb, rule);
            assert!(c.root_is_valid());
            assert_ne!(c.digest(), sb.digest());
            assert_eq!(c.seq, sb.seq);
        }
    }

    #[test]
    fn empty_lane_gives_client_filler_and_gapless_seqs() {
        let (_, mut s) = setup(4, 1);
        for want in 1..=5 {
            let (sb, _) = s.produce();
            assert_eq!(sb.seq, want);
            assert_eq!(sb.txns.len(), 4);
            assert!(sb.txns.iter().all(|t| matches!(t, Transaction::Client { .. })));
            assert_eq!(sb.proposer, ReplicaId(((want - 1) % 4) as u32));
        }
    }

    #[test]
    fn lowest_nonce_selected_once() {
        let (keys, mut s) = setup(4, 1);
        s.produce();
        let r = s.view().current().unwrap().block_ref();
        let ns = valid_nonces(&s, 2);
        for &n in ns.iter().rev() {
            let p = Payload::NonceFind { block: r, nonce: n };
            let votes = [signed(&keys, 0, p.clone()), signed(&keys, 1, p.clone())];
            s.submit(Transaction::NonceFind(Certificate::assemble(&p, votes.iter())));
        }
        let (sb, ev) = s.produce();
        let finds: Vec<_> = sb.nonce_finds().map(|(_, _, n)| n).collect();
        assert_eq!(finds, vec![ns[0]]);
        assert!(matches!(ev[0], LedgerEvent::Settled { .. }));
        // the other one is stale and dropped
        let (sb, _) = s.produce();
        assert_eq!(sb.nonce_finds().count(), 0);
        assert_eq!(s.pending(), 0);
    }

    #[test]
    fn shift_cert_goes_in_the_next_block() {
        let (keys, mut s) = setup(4, 1);
        s.produce();
        let p = Payload::Shift { block: BlockRef::new(1, 0), round: 0 };
        let votes = [signed(&keys, 2, p.clone()), signed(&keys, 3, p.clone())];
        let c = Certificate::assemble(&p, votes.iter());
        s.submit(Transaction::ShiftCert(c.clone()));
        s.submit(Transaction::ShiftCert(c));
        let (sb, ev) = s.produce();
        assert_eq!(sb.txns.iter().filter(|t| matches!(t, Transaction::ShiftCert(_))).count(), 1);
        assert_eq!(ev, vec![LedgerEvent::ShiftCommitted { block: BlockRef::new(1, 0), round: 0, merge: false }]);
    }
}
