//! Replicated protocol state.
//!
//! Every honest miner and the sequencer run the same [`Ledger`]: a
//! deterministic fold over committed S-blocks. Each S-block is processed in
//! four steps: settle a nonce for the current block, advance the shift round,
//! apply system transactions, then open the next block (or merge).

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use thiserror::Error;

use crate::accounts::{reward_txns, AccountDb, AccountError, GenesisRecord, Reconfig, Status};
use crate::chain::{aggregate, merge, ChainError, MinedBlock, MinedChain, SBlock, Transaction};
use crate::message::{BlockRef, Certificate, NodeId, Payload, Signed, Verifier};
use crate::puzzle::{Hash256, PowMode, Puzzle};
use crate::slicing::{MinerId, PenaltyRule, Slice, SliceError, SliceTable};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("S-block {got} arrived, expected {want}")]
    OutOfOrder { want: u64, got: u64 },
    #[error("S-block {0} has a bad merkle root")]
    BadRoot(u64),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Accounts(#[from] AccountError),
    #[error(transparent)]
    Genesis(#[from] SliceError),
}

/// The unsettled block being mined and its shift round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Work {
    pub block: MinedBlock,
    pub round: u32,
    /// Slice table in force when the block was opened.
    pub table: SliceTable,
}

impl Work {
    pub fn block_ref(&self) -> BlockRef {
        self.block.block_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LedgerEvent {
    Settled {
        block: BlockRef,
        nonce: u64,
        round: u32,
        /// Index of the slice holding the nonce.
        slice: usize,
        culprits: Vec<MinerId>,
        header_hash: Hash256,
        attest_seq: u64,
    },
    InvalidNonce {
        block: BlockRef,
        nonce: u64,
    },
    CertRejected {
        seq: u64,
        kind: &'static str,
    },
    /// `merge` is set when the last round was shifted away.
    ShiftCommitted {
        block: BlockRef,
        round: u32,
        merge: bool,
    },
    NewBlock {
        block: BlockRef,
        first_seq: u64,
    },
    PenaltyApplied {
        block: BlockRef,
        round: u32,
        culprits: Vec<MinerId>,
        ejected: Vec<MinerId>,
    },
    Ejected(MinerId),
    Joined(MinerId),
    Left(MinerId),
    Released(MinerId),
    Parked(MinerId),
    ReconfigRejected(MinerId),
    DifficultyChanged(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Request {
    Join { miner: MinerId, stake: u64, seller: Option<MinerId>, range: Slice },
    Leave { miner: MinerId, buyer: Option<MinerId> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ledger {
    puzzle: Puzzle,
    sigma: u32,
    f_miners: u32,
    rule: PenaltyRule,
    chain: MinedChain,
    accounts: AccountDb,
    table: SliceTable,
    difficulty: u32,
    processed: u64,
    current: Option<Work>,
    merge_from: Option<Work>,
    /// Expected penalty payload per settled seq that had shifts.
    awaiting: BTreeMap<u64, Payload>,
    requests: Vec<Request>,
    parked: Vec<MinerId>,
}

impl Ledger {
    pub fn new(genesis: GenesisRecord, accounts: AccountDb, rule: PenaltyRule) -> Result<Self, LedgerError> {
        let table = genesis.table()?;
        let chain = MinedChain::new(genesis);
        let puzzle = chain.puzzle().ok_or(SliceError::Broken("bad nonce width"))?;
        Ok(Self {
            puzzle,
            sigma: chain.genesis.sigma,
            f_miners: chain.genesis.f_miners,
            rule,
            difficulty: chain.genesis.difficulty,
            chain,
            accounts,
            table,
            processed: 0,
            current: None,
            merge_from: None,
            awaiting: BTreeMap::new(),
            requests: Vec::new(),
            parked: Vec::new(),
        })
    }

    pub fn chain(&self) -> &MinedChain {
        &self.chain
    }

    pub fn accounts(&self) -> &AccountDb {
        &self.accounts
    }

    /// Table that the next fresh block will use.
    pub fn table(&self) -> &SliceTable {
        &self.table
    }

    pub fn puzzle(&self) -> Puzzle {
        self.puzzle
    }

    pub fn difficulty(&self) -> u32 {
        self.difficulty
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn current(&self) -> Option<&Work> {
        self.current.as_ref()
    }

    pub fn merge_pending(&self) -> bool {
        self.merge_from.is_some()
    }

    pub fn quorum(&self) -> usize {
        self.f_miners as usize + 1
    }

    pub fn f_miners(&self) -> u32 {
        self.f_miners
    }

    pub fn sigma(&self) -> u32 {
        self.sigma
    }

    pub fn penalty_rule(&self) -> PenaltyRule {
        self.rule
    }

    /// Penalty payload a certificate for `seq` must carry, while still open.
    pub fn awaiting_penalty(&self, seq: u64) -> Option<&Payload> {
        self.awaiting.get(&seq)
    }

    pub fn parked(&self) -> &[MinerId] {
        &self.parked
    }

    fn max_difficulty(&self) -> u32 {
        match self.puzzle.mode {
            PowMode::Sha256 => 256,
            PowMode::Modeled => 64,
        }
    }

    /// Whether `tx` would pass this ledger's admission rules right now.
    /// The sequencer uses it to keep stale priority transactions out.
    pub fn nonce_find_ok(&self, c: &Certificate, verifier: Option<&Verifier>) -> bool {
        let (Some(w), Payload::NonceFind { block, nonce }) = (&self.current, &c.payload) else {
            return false;
        };
        *block == w.block_ref()
            && c.verify(self.quorum(), |m| w.table.position(m).is_some(), verifier).is_ok()
            && self.puzzle.check(&w.block.header, *nonce, w.block.header.difficulty) == Ok(true)
    }

    pub fn shift_ok(&self, c: &Certificate, verifier: Option<&Verifier>) -> bool {
        let (Some(w), Payload::Shift { block, round }) = (&self.current, &c.payload) else {
            return false;
        };
        *block == w.block_ref()
            && *round == w.round
            && c.verify(self.quorum(), |m| w.table.position(m).is_some(), verifier).is_ok()
    }

    pub fn penalty_ok(&self, c: &Certificate, verifier: Option<&Verifier>) -> bool {
        let Some(block) = c.payload.block() else {
            return false;
        };
        self.awaiting.get(&block.seq) == Some(&c.payload)
            && c.verify(self.quorum(), |m| self.accounts.get(m).is_some(), verifier).is_ok()
    }

    /// Folds one committed S-block into the state.
    pub fn apply(&mut self, sb: &SBlock, verifier: Option<&Verifier>) -> Result<Vec<LedgerEvent>, LedgerError> {
        if sb.seq != self.processed + 1 {
            return Err(LedgerError::OutOfOrder { want: self.processed + 1, got: sb.seq });
        }
        if !sb.root_is_valid() {
            return Err(LedgerError::BadRoot(sb.seq));
        }
        self.processed = sb.seq;
        self.chain.push_tail(sb.clone());
        let mut ev = Vec::new();
        self.nonce_check(sb, verifier, &mut ev)?;
        self.slice_check(sb, verifier, &mut ev);
        self.system_txns(sb, verifier, &mut ev)?;
        self.new_mine(&mut ev)?;
        Ok(ev)
    }

    fn nonce_check(
        &mut self,
        sb: &SBlock,
        verifier: Option<&Verifier>,
        ev: &mut Vec<LedgerEvent>,
    ) -> Result<(), LedgerError> {
        let Some(w) = &self.current else {
            return Ok(());
        };
        let r = w.block_ref();
        let mut found = None;
        for (cert, b, nonce) in sb.nonce_finds() {
            if b != r {
                continue;
            }
            if cert.verify(self.quorum(), |m| w.table.position(m).is_some(), verifier).is_err() {
                ev.push(LedgerEvent::CertRejected { seq: sb.seq, kind: "nonce_find" });
                continue;
            }
            if self.puzzle.check(&w.block.header, nonce, w.block.header.difficulty) == Ok(true) {
                found = Some(nonce);
                break;
            }
            ev.push(LedgerEvent::InvalidNonce { block: r, nonce });
        }
        let Some(nonce) = found else {
            return Ok(());
        };
        let w = self.current.take().unwrap();
        let slice = w.table.index_of_nonce(nonce).ok_or(SliceError::Broken("nonce outside table"))?;
        let culprits = if w.round > 0 { w.table.penalty_miners(slice, w.round, self.rule) } else { Vec::new() };
        let rewards = w.block.reward_txns.clone();
        self.chain.append(w.block, nonce, sb)?;
        self.accounts.apply_rewards(&rewards)?;
        if !culprits.is_empty() {
            self.awaiting.insert(r.seq, Payload::penalty(r, w.round, culprits.clone()));
        }
        let header_hash = self.chain.tip_header().hash();
        ev.push(LedgerEvent::Settled {
            block: r,
            nonce,
            round: w.round,
            slice,
            culprits,
            header_hash,
            attest_seq: sb.seq,
        });
        Ok(())
    }

    fn slice_check(&mut self, sb: &SBlock, verifier: Option<&Verifier>, ev: &mut Vec<LedgerEvent>) {
        let Some(w) = &self.current else {
            return;
        };
        let (r, round) = (w.block_ref(), w.round);
        for t in &sb.txns {
            let Transaction::ShiftCert(c) = t else { continue };
            if c.payload != (Payload::Shift { block: r, round }) {
                continue;
            }
            if c.verify(self.quorum(), |m| w.table.position(m).is_some(), verifier).is_err() {
                ev.push(LedgerEvent::CertRejected { seq: sb.seq, kind: "shift" });
                continue;
            }
            let merge = round >= self.f_miners;
            if merge {
                self.merge_from = self.current.take();
            } else if let Some(w) = &mut self.current {
                w.round += 1;
            }
            ev.push(LedgerEvent::ShiftCommitted { block: r, round, merge });
            return;
        }
    }

    fn system_txns(
        &mut self,
        sb: &SBlock,
        verifier: Option<&Verifier>,
        ev: &mut Vec<LedgerEvent>,
    ) -> Result<(), LedgerError> {
        for t in &sb.txns {
            match t {
                Transaction::PenaltyCert(c) => {
                    if !self.penalty_ok(c, verifier) {
                        ev.push(LedgerEvent::CertRejected { seq: sb.seq, kind: "penalty" });
                        continue;
                    }
                    let Payload::Penalty { block, round, culprits } = &c.payload else { continue };
                    self.awaiting.remove(&block.seq);
                    let ejected = self.accounts.apply_penalty(culprits)?;
                    ev.push(LedgerEvent::PenaltyApplied {
                        block: *block,
                        round: *round,
                        culprits: culprits.clone(),
                        ejected,
                    });
                    self.release_leavers(ev);
                }
                Transaction::JoinMiner(s) => match self.request_from(s, verifier) {
                    Some(r @ Request::Join { .. }) => self.requests.push(r),
                    _ => ev.push(LedgerEvent::CertRejected { seq: sb.seq, kind: "join" }),
                },
                Transaction::LeaveMiner(s) => match self.request_from(s, verifier) {
                    Some(r @ Request::Leave { .. }) => self.requests.push(r),
                    _ => ev.push(LedgerEvent::CertRejected { seq: sb.seq, kind: "leave" }),
                },
                Transaction::SetDifficulty { difficulty } if *difficulty <= self.max_difficulty() => {
                    self.difficulty = *difficulty;
                    ev.push(LedgerEvent::DifficultyChanged(*difficulty));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn request_from(&self, s: &Signed, verifier: Option<&Verifier>) -> Option<Request> {
        if verifier.is_some_and(|v| !v.verify(s)) {
            return None;
        }
        match s.payload {
            Payload::Join { miner, stake, seller, range } if s.signer == NodeId::Miner(miner) => {
                Some(Request::Join { miner, stake, seller, range })
            }
            Payload::Leave { miner, buyer } if s.signer == NodeId::Miner(miner) => {
                Some(Request::Leave { miner, buyer })
            }
            _ => None,
        }
    }

    /// Unlocks leavers no open penalty can still name.
    fn release_leavers(&mut self, ev: &mut Vec<LedgerEvent>) {
        let leaving: Vec<MinerId> = self.accounts.leaving().collect();
        for id in leaving {
            let exposed = self
                .awaiting
                .values()
                .any(|p| matches!(p, Payload::Penalty { culprits, .. } if culprits.contains(&id)));
            if !exposed && self.accounts.release(id) {
                ev.push(LedgerEvent::Released(id));
            }
        }
    }

    /// Applies queued ejections and reconfigurations before a fresh block.
    fn boundary(&mut self, ev: &mut Vec<LedgerEvent>) {
        for id in self.accounts.pending_ejections() {
            if let Ok(t) = self.accounts.eject(&self.table, id) {
                self.table = t;
                ev.push(LedgerEvent::Ejected(id));
            }
        }
        for r in core::mem::take(&mut self.requests) {
            let (id, res) = match r {
                Request::Join { miner, stake, seller, range } => {
                    (miner, self.accounts.process_join(&self.table, miner, stake, seller, range))
                }
                Request::Leave { miner, buyer } => (miner, self.accounts.process_leave(&self.table, miner, buyer)),
            };
            match res {
                Ok(Reconfig::Applied(t)) => {
                    // a seller that sold everything shows up as leaving
                    let before: Vec<MinerId> = self.table.miners().collect();
                    self.table = t;
                    if self.table.get(id).is_some() {
                        ev.push(LedgerEvent::Joined(id));
                    }
                    for m in before {
                        if self.table.get(m).is_none() {
                            ev.push(LedgerEvent::Left(m));
                        }
                    }
                }
                Ok(Reconfig::Parked) => {
                    self.parked.push(id);
                    ev.push(LedgerEvent::Parked(id));
                }
                Err(_) => ev.push(LedgerEvent::ReconfigRejected(id)),
            }
        }
        self.release_leavers(ev);
    }

    fn new_mine(&mut self, ev: &mut Vec<LedgerEvent>) -> Result<(), LedgerError> {
        if self.current.is_some() {
            return Ok(());
        }
        let sigma = self.sigma as usize;
        if let Some(old) = &self.merge_from {
            let have = old.block.sblocks.len();
            if self.chain.tail.len() < have + sigma {
                return Ok(());
            }
            let block = merge(&old.block, &self.chain.tail[have..have + sigma], self.sigma)?;
            let old = self.merge_from.take().unwrap();
            ev.push(LedgerEvent::NewBlock { block: block.block_ref(), first_seq: block.first_seq() });
            self.current = Some(Work { block, round: 0, table: old.table });
            return Ok(());
        }
        if self.chain.tail.len() < sigma {
            return Ok(());
        }
        self.boundary(ev);
        let rewards = reward_txns(&self.table, self.chain.genesis.block_reward);
        let block = aggregate(
            &self.chain.tip_header(),
            self.chain.last_sblock_seq(),
            &self.chain.tail[..sigma],
            self.sigma,
            rewards,
            self.difficulty,
        )?;
        ev.push(LedgerEvent::NewBlock { block: block.block_ref(), first_seq: block.first_seq() });
        self.current = Some(Work { block, round: 0, table: self.table.clone() });
        Ok(())
    }

    /// Status of `id` in the account database, if it has an account.
    pub fn status(&self, id: MinerId) -> Option<Status> {
        self.accounts.get(id).map(|a| a.status)
    }
}
