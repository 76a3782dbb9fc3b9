//! The miner state machine. Every input is a delivered event; every output
//! is an [`Action`] for the driver to schedule.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use crate::chain::SBlock;
use crate::ledger::{Ledger, LedgerError, LedgerEvent};
use crate::message::{BlockRef, Certificate, NodeId, Payload, ReplicaId, Signed, Signer, Verifier};
use crate::puzzle::{Hash256, SearchBudget};
use crate::slicing::{MinerId, Slice};
use crate::system_s::Submission;
use crate::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MinerBehavior {
    #[default]
    Honest,
    /// Never searches, announces or votes.
    Silent,
    /// Searches but keeps what it finds. Votes for shifts like everyone else.
    Withholder,
    /// Searches and announces, but never votes or builds certificates.
    VoteSuppressor,
}

impl MinerBehavior {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "honest" => Some(Self::Honest),
            "silent" => Some(Self::Silent),
            "withholder" => Some(Self::Withholder),
            "vote-suppressor" | "vote_suppressor" => Some(Self::VoteSuppressor),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Honest => "honest",
            Self::Silent => "silent",
            Self::Withholder => "withholder",
            Self::VoteSuppressor => "vote-suppressor",
        }
    }

    fn searches(self) -> bool {
        self != Self::Silent
    }

    fn announces(self) -> bool {
        matches!(self, Self::Honest | Self::VoteSuppressor)
    }

    fn votes_shift(self) -> bool {
        matches!(self, Self::Honest | Self::Withholder)
    }

    fn cooperates(self) -> bool {
        self == Self::Honest
    }
}

impl fmt::Display for MinerBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinerConfig {
    pub f_replicas: u32,
    /// Shift timer δ, also used as the re-gossip interval.
    pub delta: SimTime,
    pub attempt_cost: SimTime,
    /// Attempts per scheduled search step.
    pub chunk: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TraceKind {
    SBlock,
    NewBlock,
    Settled,
    ShiftCommitted,
    NonceFound,
    NonceReceived,
    InvalidNonce,
    ShiftVote,
    ShiftCert,
    PenaltyVote,
    PenaltyCert,
    TimerExpired,
    Regossip,
    Equivocation,
}

impl TraceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SBlock => "sblock",
            Self::NewBlock => "new_block",
            Self::Settled => "settled",
            Self::ShiftCommitted => "shift_committed",
            Self::NonceFound => "nonce_found",
            Self::NonceReceived => "nonce_received",
            Self::InvalidNonce => "invalid_nonce",
            Self::ShiftVote => "shift_vote",
            Self::ShiftCert => "shift_cert",
            Self::PenaltyVote => "penalty_vote",
            Self::PenaltyCert => "penalty_cert",
            Self::TimerExpired => "timer_expired",
            Self::Regossip => "regossip",
            Self::Equivocation => "equivocation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinerTrace {
    pub kind: TraceKind,
    pub seq: u64,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Send to every other miner.
    Broadcast(Signed),
    /// Send to every replica.
    Submit(Submission),
    /// A search step finishing after `delay`.
    SearchStep {
        gen: u64,
        delay: SimTime,
        found: Option<u64>,
    },
    SetTimer {
        token: u64,
        after: SimTime,
    },
    /// An S-block was processed; the account digest is taken right after.
    Applied {
        seq: u64,
        events: Vec<LedgerEvent>,
        accounts: Hash256,
    },
    Trace(MinerTrace),
    Fault(LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MinerStats {
    pub attempts: u64,
    pub invalid_received: u64,
    pub auth_failures: u64,
    pub equivocations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Search {
    block: BlockRef,
    slice: Slice,
    next: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimerKind {
    Delta { block: BlockRef, round: u32 },
    Regossip { block: BlockRef },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Timer {
    token: u64,
    kind: TimerKind,
}

type Copies = BTreeMap<Hash256, (SBlock, BTreeSet<ReplicaId>)>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Miner {
    id: MinerId,
    behavior: MinerBehavior,
    active_from: SimTime,
    cfg: MinerConfig,
    signer: Signer,
    verifier: Verifier,
    ledger: Ledger,
    copies: BTreeMap<u64, Copies>,
    search: Option<Search>,
    gen: u64,
    timer: Option<Timer>,
    next_token: u64,
    known: BTreeMap<BlockRef, BTreeSet<u64>>,
    early: BTreeMap<BlockRef, Vec<Signed>>,
    shift_votes: BTreeMap<(BlockRef, u32), BTreeMap<MinerId, Signed>>,
    penalty_votes: BTreeMap<Payload, BTreeMap<MinerId, Signed>>,
    voted: BTreeSet<(BlockRef, u32)>,
    certified: BTreeSet<Payload>,
    stats: MinerStats,
}

impl Miner {
    /// `behavior` takes effect at `active_from`; before that the miner is honest.
    pub fn new(
        signer: Signer,
        verifier: Verifier,
        ledger: Ledger,
        cfg: MinerConfig,
        behavior: MinerBehavior,
        active_from: SimTime,
    ) -> Self {
        let id = match signer.node() {
            NodeId::Miner(m) => m,
            other => panic!("miner built with a {other} key"),
        };
        Self {
            id,
            behavior,
            active_from,
            cfg,
            signer,
            verifier,
            ledger,
            copies: BTreeMap::new(),
            search: None,
            gen: 0,
            timer: None,
            next_token: 0,
            known: BTreeMap::new(),
            early: BTreeMap::new(),
            shift_votes: BTreeMap::new(),
            penalty_votes: BTreeMap::new(),
            voted: BTreeSet::new(),
            certified: BTreeSet::new(),
            stats: MinerStats::default(),
        }
    }

    pub fn id(&self) -> MinerId {
        self.id
    }

    pub fn behavior(&self) -> MinerBehavior {
        self.behavior
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn stats(&self) -> MinerStats {
        self.stats
    }

    pub fn shift_round(&self) -> Option<u32> {
        self.ledger.current().map(|w| w.round)
    }

    pub fn is_searching(&self) -> bool {
        self.search.is_some()
    }

    pub fn timer_armed(&self) -> bool {
        matches!(self.timer, Some(Timer { kind: TimerKind::Delta { .. }, .. }))
    }

    fn acting(&self, now: SimTime) -> MinerBehavior {
        if now >= self.active_from {
            self.behavior
        } else {
            MinerBehavior::Honest
        }
    }

    fn trace(out: &mut Vec<Action>, kind: TraceKind, seq: u64, round: u32) {
        out.push(Action::Trace(MinerTrace { kind, seq, round }));
    }

    /// A copy of a committed S-block from replica `from`. Blocks are processed
    /// strictly in order once `f_R + 1` replicas sent the same content.
    pub fn on_sblock_copy(&mut self, now: SimTime, from: ReplicaId, sb: &SBlock) -> Vec<Action> {
        let mut out = Vec::new();
        if sb.seq <= self.ledger.processed() {
            return out;
        }
        let d = sb.digest();
        let slot = self.copies.entry(sb.seq).or_default();
        if !slot.contains_key(&d) {
            slot.insert(d, (sb.clone(), BTreeSet::new()));
            if slot.len() == 2 {
                self.stats.equivocations += 1;
                Self::trace(&mut out, TraceKind::Equivocation, sb.seq, 0);
            }
        }
        slot.get_mut(&d).unwrap().1.insert(from);
        self.drain(now, &mut out);
        out
    }

    fn drain(&mut self, now: SimTime, out: &mut Vec<Action>) {
        let need = self.cfg.f_replicas as usize + 1;
        loop {
            let next = self.ledger.processed() + 1;
            let Some(slot) = self.copies.get(&next) else { break };
            let Some((sb, _)) = slot.values().find(|(_, who)| who.len() >= need) else { break };
            let sb = sb.clone();
            self.copies.remove(&next);
            match self.ledger.apply(&sb, Some(&self.verifier)) {
                Ok(events) => {
                    Self::trace(out, TraceKind::SBlock, sb.seq, 0);
                    out.push(Action::Applied {
                        seq: sb.seq,
                        events: events.clone(),
                        accounts: self.ledger.accounts().state_digest(),
                    });
                    self.react(now, &events, out);
                }
                Err(e) => {
                    out.push(Action::Fault(e));
                    break;
                }
            }
        }
    }

    fn react(&mut self, now: SimTime, events: &[LedgerEvent], out: &mut Vec<Action>) {
        for e in events {
            match e {
                LedgerEvent::Settled { block, round, culprits, .. } => {
                    Self::trace(out, TraceKind::Settled, block.seq, *round);
                    self.stop(block.seq);
                    self.known.retain(|b, _| b.seq > block.seq);
                    self.early.retain(|b, _| b.seq > block.seq);
                    self.shift_votes.retain(|(b, _), _| b.seq > block.seq);
                    self.voted.retain(|(b, _)| b.seq > block.seq);
                    self.certified.retain(|p| !matches!(p, Payload::Shift { block: b, .. } if b.seq <= block.seq));
                    if *round > 0 && !culprits.contains(&self.id) && self.acting(now).cooperates() {
                        let p = Payload::penalty(*block, *round, culprits.clone());
                        Self::trace(out, TraceKind::PenaltyVote, block.seq, *round);
                        self.cast(now, p, out);
                    }
                }
                LedgerEvent::ShiftCommitted { block, round, merge } => {
                    Self::trace(out, TraceKind::ShiftCommitted, block.seq, *round);
                    if *merge {
                        self.stop(block.seq);
                    } else {
                        self.start_round(now, *block, round + 1, out);
                    }
                }
                LedgerEvent::NewBlock { block, .. } => {
                    Self::trace(out, TraceKind::NewBlock, block.seq, block.merge_count);
                    self.start_round(now, *block, 0, out);
                    let early = self.early.remove(block).unwrap_or_default();
                    self.early.retain(|b, _| b > block);
                    for m in early {
                        self.on_nonce_find(now, &m, out);
                    }
                }
                LedgerEvent::PenaltyApplied { block, .. } => {
                    self.penalty_votes.retain(|p, _| p.block().map_or(true, |b| b.seq != block.seq));
                }
                LedgerEvent::InvalidNonce { block, .. } => {
                    Self::trace(out, TraceKind::InvalidNonce, block.seq, 0);
                }
                _ => {}
            }
        }
    }

    /// Cancels search and timer for mined seq `seq`.
    fn stop(&mut self, seq: u64) {
        if self.search.is_some_and(|s| s.block.seq == seq) {
            self.search = None;
            self.gen += 1;
        }
        let stale = match self.timer {
            Some(Timer { kind: TimerKind::Delta { block, .. } | TimerKind::Regossip { block }, .. }) => {
                block.seq == seq
            }
            None => false,
        };
        if stale {
            self.timer = None;
        }
    }

    fn arm(&mut self, kind: TimerKind, out: &mut Vec<Action>) {
        self.next_token += 1;
        self.timer = Some(Timer { token: self.next_token, kind });
        out.push(Action::SetTimer { token: self.next_token, after: self.cfg.delta });
    }

    fn start_round(&mut self, now: SimTime, block: BlockRef, round: u32, out: &mut Vec<Action>) {
        self.search = None;
        self.gen += 1;
        self.timer = None;
        let Some(w) = self.ledger.current() else { return };
        if w.block_ref() != block || w.round != round {
            return;
        }
        let Some((_, slice)) = w.table.slice_for_round(self.id, round) else { return };
        let act = self.acting(now);
        if self.known.get(&block).is_some_and(|k| !k.is_empty()) && act.announces() {
            self.arm(TimerKind::Regossip { block }, out);
            return;
        }
        self.arm(TimerKind::Delta { block, round }, out);
        if act.searches() {
            self.search = Some(Search { block, slice, next: slice.start });
            self.step(out);
        }
    }

    /// Runs the next chunk of the search now and reports when it would finish.
    fn step(&mut self, out: &mut Vec<Action>) {
        let Some(s) = self.search.as_mut() else { return };
        let Some(w) = self.ledger.current() else { return };
        if s.next >= s.slice.end || w.block_ref() != s.block {
            self.search = None;
            return;
        }
        let end = s.slice.end.min(s.next.saturating_add(self.cfg.chunk));
        let h = &w.block.header;
        let o = self.ledger.puzzle().search(h, Slice::new(s.next, end), h.difficulty, SearchBudget::Unbounded);
        s.next += o.attempts;
        self.stats.attempts += o.attempts;
        out.push(Action::SearchStep { gen: self.gen, delay: o.attempts * self.cfg.attempt_cost, found: o.nonce });
    }

    pub fn on_search_step(&mut self, now: SimTime, gen: u64, found: Option<u64>) -> Vec<Action> {
        let mut out = Vec::new();
        if gen != self.gen {
            return out;
        }
        match found {
            Some(n) => self.on_nonce_found(now, n, &mut out),
            None => self.step(&mut out),
        }
        out
    }

    fn on_nonce_found(&mut self, now: SimTime, nonce: u64, out: &mut Vec<Action>) {
        let Some(s) = self.search.take() else { return };
        self.gen += 1;
        Self::trace(out, TraceKind::NonceFound, s.block.seq, self.shift_round().unwrap_or(0));
        self.known.entry(s.block).or_default().insert(nonce);
        if self.acting(now).announces() {
            let m = self.signer.sign(Payload::NonceFind { block: s.block, nonce });
            out.push(Action::Broadcast(m.clone()));
            out.push(Action::Submit(Submission::NonceFind(m)));
            self.arm(TimerKind::Regossip { block: s.block }, out);
        }
    }

    /// A signed message from another miner.
    pub fn on_message(&mut self, now: SimTime, msg: &Signed) -> Vec<Action> {
        let mut out = Vec::new();
        if !self.verifier.verify(msg) || !matches!(msg.signer, NodeId::Miner(_)) {
            self.stats.auth_failures += 1;
            return out;
        }
        match msg.payload {
            Payload::NonceFind { .. } => self.on_nonce_find(now, msg, &mut out),
            Payload::Shift { .. } | Payload::Penalty { .. } => self.record_vote(now, msg, &mut out),
            _ => {}
        }
        out
    }

    fn on_nonce_find(&mut self, now: SimTime, msg: &Signed, out: &mut Vec<Action>) {
        let Payload::NonceFind { block, nonce } = msg.payload else { return };
        let cur = self.ledger.current().map(|w| w.block_ref());
        if cur != Some(block) {
            let ahead = block.seq > self.ledger.chain().tip_seq() && cur.map_or(true, |c| block > c);
            if ahead {
                self.early.entry(block).or_default().push(msg.clone());
            }
            return;
        }
        if self.known.get(&block).is_some_and(|k| k.contains(&nonce)) {
            return;
        }
        let w = self.ledger.current().unwrap();
        if self.ledger.puzzle().check(&w.block.header, nonce, w.block.header.difficulty) != Ok(true) {
            self.stats.invalid_received += 1;
            Self::trace(out, TraceKind::InvalidNonce, block.seq, w.round);
            return;
        }
        Self::trace(out, TraceKind::NonceReceived, block.seq, w.round);
        self.known.entry(block).or_default().insert(nonce);
        if self.search.is_some() {
            self.search = None;
            self.gen += 1;
        }
        let act = self.acting(now);
        if act.announces() {
            let mine = self.signer.sign(Payload::NonceFind { block, nonce });
            out.push(Action::Submit(Submission::NonceFind(mine)));
            self.arm(TimerKind::Regossip { block }, out);
        } else if act != MinerBehavior::Withholder {
            self.timer = None;
        }
    }

    /// Signs `p`, sends it to everyone and counts it locally.
    fn cast(&mut self, now: SimTime, p: Payload, out: &mut Vec<Action>) {
        let m = self.signer.sign(p);
        out.push(Action::Broadcast(m.clone()));
        self.record_vote(now, &m, out);
    }

    fn record_vote(&mut self, now: SimTime, msg: &Signed, out: &mut Vec<Action>) {
        let NodeId::Miner(from) = msg.signer else { return };
        let quorum = self.ledger.quorum();
        let builds = self.acting(now).cooperates();
        match &msg.payload {
            Payload::Shift { block, round } => {
                if block.seq <= self.ledger.chain().tip_seq() {
                    return;
                }
                let votes = self.shift_votes.entry((*block, *round)).or_default();
                votes.insert(from, msg.clone());
                if votes.len() >= quorum && builds && self.certified.insert(msg.payload.clone()) {
                    let c = Certificate::assemble(&msg.payload, votes.values());
                    Self::trace(out, TraceKind::ShiftCert, block.seq, *round);
                    out.push(Action::Submit(Submission::ShiftCert(c)));
                }
            }
            Payload::Penalty { block, round, .. } => {
                let votes = self.penalty_votes.entry(msg.payload.clone()).or_default();
                votes.insert(from, msg.clone());
                if votes.len() >= quorum && builds && self.certified.insert(msg.payload.clone()) {
                    let c = Certificate::assemble(&msg.payload, votes.values());
                    Self::trace(out, TraceKind::PenaltyCert, block.seq, *round);
                    out.push(Action::Submit(Submission::PenaltyCert(c)));
                }
            }
            _ => {}
        }
    }

    pub fn on_timer(&mut self, now: SimTime, token: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let Some(t) = self.timer.filter(|t| t.token == token) else { return out };
        self.timer = None;
        let cur = self.ledger.current().map(|w| (w.block_ref(), w.round));
        match t.kind {
            TimerKind::Delta { block, round } => {
                if cur != Some((block, round)) {
                    return out;
                }
                let act = self.acting(now);
                let knows = self.known.get(&block).is_some_and(|k| !k.is_empty());
                if knows && act != MinerBehavior::Withholder {
                    return out;
                }
                Self::trace(&mut out, TraceKind::TimerExpired, block.seq, round);
                if act.votes_shift() && self.voted.insert((block, round)) {
                    Self::trace(&mut out, TraceKind::ShiftVote, block.seq, round);
                    self.cast(now, Payload::Shift { block, round }, &mut out);
                }
            }
            TimerKind::Regossip { block } => {
                if cur.map(|c| c.0) != Some(block) {
                    return out;
                }
                Self::trace(&mut out, TraceKind::Regossip, block.seq, cur.unwrap().1);
                let nonces: Vec<u64> = self.known.get(&block).into_iter().flatten().copied().collect();
                for nonce in nonces {
                    let m = self.signer.sign(Payload::NonceFind { block, nonce });
                    out.push(Action::Broadcast(m.clone()));
                    out.push(Action::Submit(Submission::NonceFind(m)));
                }
                self.arm(TimerKind::Regossip { block }, &mut out);
            }
        }
        out
    }
}
