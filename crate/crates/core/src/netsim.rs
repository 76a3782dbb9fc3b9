//! Seeded discrete-event driver: scheduler, delay model, fault injection,
//! auditing and metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accounts::{init_genesis, AccountError, AccountParams, GenesisParams, GenesisRecord};
use crate::chain::{verify_chain, AuditFailure, SBlock};
use crate::ledger::{Ledger, LedgerError, LedgerEvent};
use crate::message::{KeyRing, NodeId, Payload, ReplicaId, Signed, Verifier};
use crate::miner::{Action, Miner, MinerBehavior, MinerConfig, MinerTrace};
use crate::puzzle::{Hash256, NonceSpace, PowMode};
use crate::slicing::{MinerId, PenaltyRule, Slice};
use crate::system_s::{ConfigError, Replica, ReplicaBehavior, Sequencer, Submission, SystemConfig};
use crate::SimTime;

/// Independent RNG stream for `label`, derived from the run seed.
pub fn rng_stream(seed: u64, label: &str) -> ChaCha8Rng {
    let h = Hash256::digest_parts(&[b"poc/rng", &seed.to_be_bytes(), label.as_bytes()]);
    ChaCha8Rng::from_seed(h.0)
}

/// Message delays under partial synchrony.
///
/// Before `gst` a message may be dropped (and retried, at most
/// `retry_budget` times), duplicated, and delayed up to `pre_gst_max`, but it
/// always arrives by `gst + delta`. From `gst` on every delay is at most
/// `delta` and nothing is dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayModel {
    pub gst: SimTime,
    pub delta: SimTime,
    pub min_delay: SimTime,
    pub pre_gst_max: SimTime,
    pub drop_prob: f64,
    pub dup_prob: f64,
    pub retry_budget: u32,
    pub retry_after: SimTime,
}

impl DelayModel {
    pub fn synchronous(delta: SimTime) -> Self {
        Self {
            gst: 0,
            delta,
            min_delay: 1.min(delta),
            pre_gst_max: delta,
            drop_prob: 0.0,
            dup_prob: 0.0,
            retry_budget: 0,
            retry_after: delta.max(1),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let prob = |p: f64| (0.0..1.0).contains(&p);
        if self.min_delay > self.delta {
            return Err(SimError::Delay("min_delay exceeds delta"));
        }
        if self.pre_gst_max < self.min_delay {
            return Err(SimError::Delay("pre_gst_max is below min_delay"));
        }
        if !prob(self.drop_prob) || !prob(self.dup_prob) {
            return Err(SimError::Delay("probabilities must lie in [0, 1)"));
        }
        if self.retry_after == 0 {
            return Err(SimError::Delay("retry_after must be positive"));
        }
        Ok(())
    }

    /// Delivery times for one message sent at `now`.
    pub fn deliveries(&self, now: SimTime, rng: &mut ChaCha8Rng) -> Vec<SimTime> {
        if now >= self.gst {
            return vec![now + rng.gen_range(self.min_delay..=self.delta)];
        }
        let cap = self.gst + self.delta;
        let mut t = now;
        let mut retries = 0;
        while retries < self.retry_budget && rng.gen_bool(self.drop_prob) {
            t += self.retry_after;
            retries += 1;
        }
        let mut out = vec![(t + rng.gen_range(self.min_delay..=self.pre_gst_max)).min(cap)];
        if rng.gen_bool(self.dup_prob) {
            out.push((now + rng.gen_range(self.min_delay..=self.pre_gst_max)).min(cap));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AdversarySpec {
    pub miners: BTreeMap<MinerId, MinerBehavior>,
    pub replicas: BTreeMap<ReplicaId, ReplicaBehavior>,
    /// Behaviours switch on at this time; before it everyone is honest.
    pub activate_at: SimTime,
    /// Keys handed to the adversary. Only the fork scenario uses them.
    pub compromised: Vec<NodeId>,
    /// Adversary to honest hashpower `(m, h)` for fork runs.
    pub hashpower: Option<(u64, u64)>,
}

impl AdversarySpec {
    pub fn faulty_miners(&self) -> usize {
        self.miners.values().filter(|b| **b != MinerBehavior::Honest).count()
    }

    pub fn faulty_replicas(&self) -> usize {
        self.replicas.values().filter(|b| **b != ReplicaBehavior::Honest).count()
    }

    pub fn behavior_of(&self, id: MinerId) -> MinerBehavior {
        self.miners.get(&id).copied().unwrap_or_default()
    }

    pub fn validate(&self, sys: &SystemConfig) -> Result<(), SimError> {
        if self.faulty_miners() > sys.f_miners as usize {
            return Err(SimError::TooManyFaultyMiners { got: self.faulty_miners(), max: sys.f_miners });
        }
        if self.faulty_replicas() > sys.f_replicas as usize {
            return Err(SimError::TooManyFaultyReplicas { got: self.faulty_replicas(), max: sys.f_replicas });
        }
        if let Some(r) = self.replicas.keys().find(|r| r.0 >= sys.n_replicas) {
            return Err(SimError::UnknownReplica(*r));
        }
        if matches!(self.hashpower, Some((0, _)) | Some((_, 0))) {
            return Err(SimError::Other("hashpower terms must be positive"));
        }
        Ok(())
    }
}

/// A membership or difficulty change submitted at a given time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reconfiguration {
    Join { miner: MinerId, stake: u64, seller: Option<MinerId>, range: Slice },
    Leave { miner: MinerId, buyer: Option<MinerId> },
    SetDifficulty(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub system: SystemConfig,
    pub mode: PowMode,
    pub version: u32,
    /// One stake per genesis miner; empty means the minimum stake each.
    pub stakes: Vec<u64>,
    pub accounts: AccountParams,
    pub attempt_cost: SimTime,
    pub chunk: u64,
    pub delay: DelayModel,
    pub adversary: AdversarySpec,
    pub penalty_rule: PenaltyRule,
    /// Workload: the run is done once every honest miner has settled the
    /// first `blocks * sigma` S-blocks.
    pub blocks: u64,
    pub max_time: SimTime,
    /// Record a liveness violation if the workload is not done by `max_time`.
    pub expect_completion: bool,
    pub seed: u64,
    pub reconfig: Vec<(SimTime, Reconfiguration)>,
    /// Keep trace records in memory, not only their hash.
    pub keep_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            mode: PowMode::Sha256,
            version: 1,
            stakes: Vec::new(),
            accounts: AccountParams::default(),
            attempt_cost: 1,
            chunk: 4096,
            delay: DelayModel::synchronous(50),
            adversary: AdversarySpec::default(),
            penalty_rule: PenaltyRule::Holders,
            blocks: 10,
            max_time: 50_000_000,
            expect_completion: true,
            seed: 1,
            reconfig: Vec::new(),
            keep_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    System(#[from] ConfigError),
    #[error("{got} non-honest miners, f_miners allows {max}")]
    TooManyFaultyMiners { got: usize, max: u32 },
    #[error("{got} non-honest replicas, f_replicas allows {max}")]
    TooManyFaultyReplicas { got: usize, max: u32 },
    #[error("replica {0} does not exist")]
    UnknownReplica(ReplicaId),
    #[error("stakes list has {got} entries for {want} miners")]
    Stakes { got: usize, want: u32 },
    #[error("delay model: {0}")]
    Delay(&'static str),
    #[error(transparent)]
    Genesis(#[from] AccountError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("{0}")]
    Other(&'static str),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.system.validate()?;
        self.delay.validate()?;
        self.adversary.validate(&self.system)?;
        if !self.stakes.is_empty() && self.stakes.len() != self.system.n_miners as usize {
            return Err(SimError::Stakes { got: self.stakes.len(), want: self.system.n_miners });
        }
        if self.attempt_cost == 0 || self.chunk == 0 {
            return Err(SimError::Other("attempt_cost and chunk must be positive"));
        }
        if self.blocks == 0 {
            return Err(SimError::Other("blocks must be positive"));
        }
        let max_d = if self.mode == PowMode::Modeled { 64 } else { 256 };
        if self.system.difficulty > max_d {
            return Err(SimError::Other("difficulty exceeds the hash width"));
        }
        Ok(())
    }

    /// δ: configured, or four times the largest genesis slice search.
    pub fn delta(&self, largest_slice: u64) -> SimTime {
        self.system.delta.unwrap_or_else(|| 4 * largest_slice.max(1) * self.attempt_cost)
    }

    /// S-blocks the workload covers.
    pub fn workload(&self) -> u64 {
        self.blocks * self.system.sigma as u64
    }
}

/// One trace line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub node: NodeId,
    pub kind: &'static str,
    pub seq: u64,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Two honest miners settled different blocks at one mined seq.
    ConflictingBlocks {
        seq: u64,
    },
    /// Honest account databases differ after S-block `sblock`.
    AccountDivergence {
        sblock: u64,
    },
    /// A post-GST message took longer than Δ.
    DeltaBound {
        sent: SimTime,
        delivered: SimTime,
    },
    /// A committed penalty named an honest miner in a synchronous run.
    HonestPenalized {
        seq: u64,
        miner: MinerId,
    },
    /// The workload was not settled by the end of the run.
    Liveness {
        covered: u64,
        needed: u64,
    },
    Ledger {
        miner: MinerId,
        error: LedgerError,
    },
    Audit {
        miner: MinerId,
        failure: AuditFailure,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ConflictingBlocks { seq } => write!(f, "conflicting blocks settled at mined seq {seq}"),
            Self::AccountDivergence { sblock } => write!(f, "account state diverged after S-block {sblock}"),
            Self::DeltaBound { sent, delivered } => write!(f, "message sent at {sent} delivered at {delivered}"),
            Self::HonestPenalized { seq, miner } => write!(f, "honest {miner} penalized for block {seq}"),
            Self::Liveness { covered, needed } => write!(f, "only {covered} of {needed} S-blocks settled"),
            Self::Ledger { miner, error } => write!(f, "{miner}: {error}"),
            Self::Audit { miner, failure } => write!(f, "{miner}: chain audit failed: {failure}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencySummary {
    pub count: u64,
    pub min: SimTime,
    pub median: SimTime,
    pub p90: SimTime,
    pub max: SimTime,
    pub mean: f64,
}

impl LatencySummary {
    pub fn from_samples(mut xs: Vec<SimTime>) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        xs.sort_unstable();
        let n = xs.len();
        let at = |q: usize| xs[((n - 1) * q) / 100];
        Self {
            count: n as u64,
            min: xs[0],
            median: at(50),
            p90: at(90),
            max: xs[n - 1],
            mean: xs.iter().map(|&x| x as f64).sum::<f64>() / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PenaltyRecord {
    pub seq: u64,
    pub round: u32,
    pub culprits: Vec<MinerId>,
    pub honest_named: Vec<MinerId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub seed: u64,
    pub completed: bool,
    pub end_time: SimTime,
    pub committed_sblocks: u64,
    /// Fewest blocks settled by any honest miner.
    pub settled_blocks: u64,
    pub settled_per_mtick: f64,
    pub latency: LatencySummary,
    /// Shift round at settlement, per mined block.
    pub shift_histogram: BTreeMap<u32, u64>,
    pub merges: u64,
    pub penalties: Vec<PenaltyRecord>,
    pub total_attempts: u64,
    /// Total attempts when each block was first settled by an honest miner.
    pub settle_attempts: Vec<u64>,
    /// Most attempts by any one miner at those instants: the parallel depth
    /// of the search, proportional to time spent.
    pub settle_depth: Vec<u64>,
    pub rewards: Vec<(MinerId, u64)>,
    pub equivocations: u64,
    pub invalid_nonces: u64,
    pub auth_failures: u64,
    pub messages: u64,
    pub violations: Vec<Violation>,
    pub trace_hash: Hash256,
    pub trace_events: u64,
}

impl MetricsReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Event {
    Commit,
    Copy { to: usize, from: ReplicaId, sb: Rc<SBlock>, sent: SimTime },
    Message { to: usize, msg: Rc<Signed>, sent: SimTime },
    Submit { to: usize, sub: Rc<Submission>, sent: SimTime },
    Step { miner: usize, gen: u64, found: Option<u64> },
    Timer { miner: usize, token: u64 },
    Reconfig(Reconfiguration),
}

pub struct Simulation {
    cfg: SimConfig,
    genesis: GenesisRecord,
    keys: KeyRing,
    verifier: Verifier,
    miners: Vec<Miner>,
    honest: Vec<bool>,
    replicas: Vec<Replica>,
    sequencer: Sequencer,
    queue: BTreeMap<(SimTime, u64), Event>,
    tie: u64,
    now: SimTime,
    net: ChaCha8Rng,
    trace_hasher: Sha256,
    trace_events: u64,
    trace: Vec<TraceRecord>,
    commit_time: Vec<SimTime>,
    settled_hash: BTreeMap<u64, Hash256>,
    settled_at: BTreeMap<u64, (SimTime, u64, u64)>,
    settle_attempts: Vec<u64>,
    settle_depth: Vec<u64>,
    digests: BTreeMap<u64, Hash256>,
    shift_histogram: BTreeMap<u32, u64>,
    merges: u64,
    penalties: Vec<PenaltyRecord>,
    messages: u64,
    violations: Vec<Violation>,
    faulted: BTreeSet<usize>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let sys = cfg.system;
        let keys = KeyRing::new(cfg.seed);
        let verifier = keys.verifier();
        let min = cfg.accounts.min_stake();
        let stakes: Vec<(MinerId, u64)> =
            (0..sys.n_miners).map(|i| (MinerId(i), cfg.stakes.get(i as usize).copied().unwrap_or(min))).collect();
        let space = NonceSpace::new(sys.nonce_bits).map_err(|_| ConfigError::NonceBits(sys.nonce_bits))?;
        let g = GenesisParams {
            version: cfg.version,
            space,
            pow_mode: cfg.mode,
            difficulty: sys.difficulty,
            sigma: sys.sigma,
            n_replicas: sys.n_replicas,
            f_miners: sys.f_miners,
        };
        let (genesis, db, table) = init_genesis(&stakes, &keys, cfg.accounts, g)?;
        let ledger = Ledger::new(genesis.clone(), db, cfg.penalty_rule)?;
        let largest = table.entries().iter().map(|e| e.1.len()).max().unwrap_or(1);
        let mcfg = MinerConfig {
            f_replicas: sys.f_replicas,
            delta: cfg.delta(largest),
            attempt_cost: cfg.attempt_cost,
            chunk: cfg.chunk,
        };

        let mut ids: Vec<MinerId> = table.miners().collect();
        for (_, r) in &cfg.reconfig {
            if let Reconfiguration::Join { miner, .. } = r {
                if !ids.contains(miner) {
                    ids.push(*miner);
                }
            }
        }
        let mut miners = Vec::new();
        let mut honest = Vec::new();
        for id in ids {
            let b = cfg.adversary.behavior_of(id);
            honest.push(b == MinerBehavior::Honest);
            miners.push(Miner::new(
                keys.signer(NodeId::Miner(id)),
                verifier.clone(),
                ledger.clone(),
                mcfg,
                b,
                cfg.adversary.activate_at,
            ));
        }
        let replicas = (0..sys.n_replicas)
            .map(|i| {
                let id = ReplicaId(i);
                Replica::new(id, cfg.adversary.replicas.get(&id).copied().unwrap_or_default(), sys.f_miners)
            })
            .collect();
        let sequencer = Sequencer::new(&sys, ledger, verifier.clone(), rng_stream(cfg.seed, "clients"));
        let net = rng_stream(cfg.seed, "net");
        let mut sim = Self {
            genesis,
            keys,
            verifier,
            miners,
            honest,
            replicas,
            sequencer,
            queue: BTreeMap::new(),
            tie: 0,
            now: 0,
            net,
            trace_hasher: Sha256::new(),
            trace_events: 0,
            trace: Vec::new(),
            commit_time: vec![0],
            settled_hash: BTreeMap::new(),
            settled_at: BTreeMap::new(),
            settle_attempts: Vec::new(),
            settle_depth: Vec::new(),
            digests: BTreeMap::new(),
            shift_histogram: BTreeMap::new(),
            merges: 0,
            penalties: Vec::new(),
            messages: 0,
            violations: Vec::new(),
            faulted: BTreeSet::new(),
            cfg,
        };
        sim.schedule(sim.cfg.system.commit_interval, Event::Commit);
        for (t, r) in sim.cfg.reconfig.clone() {
            sim.schedule(t, Event::Reconfig(r));
        }
        Ok(sim)
    }

    pub fn genesis(&self) -> &GenesisRecord {
        &self.genesis
    }

    pub fn miners(&self) -> &[Miner] {
        &self.miners
    }

    pub fn is_honest(&self, idx: usize) -> bool {
        self.honest[idx]
    }

    pub fn sequencer(&self) -> &Sequencer {
        &self.sequencer
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// An honest miner's view, used for chain dumps.
    pub fn reference_miner(&self) -> Option<&Miner> {
        self.miners.iter().zip(&self.honest).find(|(_, h)| **h).map(|(m, _)| m)
    }

    fn schedule(&mut self, at: SimTime, ev: Event) {
        assert!(at >= self.now, "event scheduled into the past");
        self.tie += 1;
        self.queue.insert((at, self.tie), ev);
    }

    fn record(&mut self, node: NodeId, kind: &'static str, seq: u64, round: u32) {
        let r = TraceRecord { time: self.now, node, kind, seq, round };
        let (tag, id) = match node {
            NodeId::Miner(m) => (0u8, m.0),
            NodeId::Replica(r) => (1, r.0),
            NodeId::Sequencer => (2, 0),
        };
        self.trace_hasher.update(r.time.to_be_bytes());
        self.trace_hasher.update([tag]);
        self.trace_hasher.update(id.to_be_bytes());
        self.trace_hasher.update((kind.len() as u8).to_be_bytes());
        self.trace_hasher.update(kind.as_bytes());
        self.trace_hasher.update(seq.to_be_bytes());
        self.trace_hasher.update(round.to_be_bytes());
        self.trace_events += 1;
        if self.cfg.keep_trace {
            self.trace.push(r);
        }
    }

    fn deliver_times(&mut self) -> Vec<SimTime> {
        self.messages += 1;
        self.cfg.delay.deliveries(self.now, &mut self.net)
    }

    fn check_bound(&mut self, sent: SimTime) {
        let d = self.cfg.delay;
        if sent >= d.gst && self.now - sent > d.delta {
            self.violations.push(Violation::DeltaBound { sent, delivered: self.now });
        }
    }

    /// Runs to completion of the workload or `max_time`.
    pub fn run(&mut self) -> MetricsReport {
        let completed = self.run_until(self.cfg.max_time);
        self.finish(completed)
    }

    /// Delivers every event due at or before `t`, stopping early once the
    /// workload is settled. Returns whether it is.
    pub fn run_until(&mut self, t: SimTime) -> bool {
        while let Some((&(at, tie), _)) = self.queue.first_key_value() {
            if at > t {
                break;
            }
            let ev = self.queue.remove(&(at, tie)).unwrap();
            self.now = at;
            let check = matches!(ev, Event::Copy { .. });
            self.handle(ev);
            if check && self.done() {
                return true;
            }
        }
        self.done()
    }

    fn covered(&self) -> u64 {
        self.miners
            .iter()
            .zip(&self.honest)
            .filter(|(_, h)| **h)
            .map(|(m, _)| m.ledger().chain().last_sblock_seq())
            .min()
            .unwrap_or(0)
    }

    fn done(&self) -> bool {
        self.covered() >= self.cfg.workload()
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Commit => self.commit(),
            Event::Copy { to, from, sb, sent } => {
                self.check_bound(sent);
                let out = self.miners[to].on_sblock_copy(self.now, from, &sb);
                self.dispatch(to, out);
            }
            Event::Message { to, msg, sent } => {
                self.check_bound(sent);
                let out = self.miners[to].on_message(self.now, &msg);
                self.dispatch(to, out);
            }
            Event::Submit { to, sub, sent } => {
                self.check_bound(sent);
                if let Some(tx) = self.replicas[to].on_submission((*sub).clone(), &self.verifier) {
                    self.sequencer.submit(tx);
                }
            }
            Event::Step { miner, gen, found } => {
                let out = self.miners[miner].on_search_step(self.now, gen, found);
                self.dispatch(miner, out);
            }
            Event::Timer { miner, token } => {
                let out = self.miners[miner].on_timer(self.now, token);
                self.dispatch(miner, out);
            }
            Event::Reconfig(r) => {
                let sub = match r {
                    Reconfiguration::Join { miner, stake, seller, range } => {
                        Submission::Join(self.keys.signer(NodeId::Miner(miner)).sign(Payload::Join {
                            miner,
                            stake,
                            seller,
                            range,
                        }))
                    }
                    Reconfiguration::Leave { miner, buyer } => {
                        Submission::Leave(self.keys.signer(NodeId::Miner(miner)).sign(Payload::Leave { miner, buyer }))
                    }
                    Reconfiguration::SetDifficulty(d) => Submission::SetDifficulty(d),
                };
                self.submit_all(Rc::new(sub));
            }
        }
    }

    fn submit_all(&mut self, sub: Rc<Submission>) {
        for k in 0..self.replicas.len() {
            for t in self.deliver_times() {
                self.schedule(t, Event::Submit { to: k, sub: sub.clone(), sent: self.now });
            }
        }
    }

    fn commit(&mut self) {
        let (sb, events) = self.sequencer.produce();
        self.commit_time.push(self.now);
        self.record(NodeId::Sequencer, "commit", sb.seq, 0);
        for e in &events {
            match e {
                LedgerEvent::Settled { round, .. } => *self.shift_histogram.entry(*round).or_default() += 1,
                LedgerEvent::NewBlock { block, .. } if block.merge_count > 0 => self.merges += 1,
                LedgerEvent::PenaltyApplied { block, round, culprits, .. } => {
                    let honest_named: Vec<MinerId> = culprits
                        .iter()
                        .copied()
                        .filter(|c| self.cfg.adversary.behavior_of(*c) == MinerBehavior::Honest)
                        .collect();
                    if self.cfg.delay.gst == 0 {
                        for &miner in &honest_named {
                            self.violations.push(Violation::HonestPenalized { seq: block.seq, miner });
                        }
                    }
                    self.penalties.push(PenaltyRecord {
                        seq: block.seq,
                        round: *round,
                        culprits: culprits.clone(),
                        honest_named,
                    });
                }
                _ => {}
            }
        }
        let tip = self.sequencer.view().chain().tip_seq();
        for r in &mut self.replicas {
            r.prune(tip);
        }
        let sb = Rc::new(sb);
        for k in 0..self.replicas.len() {
            let Some(copy) = self.replicas[k].copy_for(&sb) else { continue };
            let copy = if copy == *sb { sb.clone() } else { Rc::new(copy) };
            let from = self.replicas[k].id();
            for to in 0..self.miners.len() {
                for t in self.deliver_times() {
                    self.schedule(t, Event::Copy { to, from, sb: copy.clone(), sent: self.now });
                }
            }
        }
        let next = self.now + self.cfg.system.commit_interval;
        self.schedule(next, Event::Commit);
    }

    fn dispatch(&mut self, idx: usize, out: Vec<Action>) {
        let me = NodeId::Miner(self.miners[idx].id());
        for a in out {
            match a {
                Action::Broadcast(m) => {
                    let m = Rc::new(m);
                    for to in (0..self.miners.len()).filter(|&j| j != idx) {
                        for t in self.deliver_times() {
                            self.schedule(t, Event::Message { to, msg: m.clone(), sent: self.now });
                        }
                    }
                }
                Action::Submit(s) => self.submit_all(Rc::new(s)),
                Action::SearchStep { gen, delay, found } => {
                    self.schedule(self.now + delay, Event::Step { miner: idx, gen, found });
                }
                Action::SetTimer { token, after } => {
                    self.schedule(self.now + after, Event::Timer { miner: idx, token });
                }
                Action::Trace(MinerTrace { kind, seq, round }) => self.record(me, kind.as_str(), seq, round),
                Action::Applied { seq, events, accounts } => {
                    if self.honest[idx] {
                        self.audit(idx, seq, &events, accounts);
                    }
                }
                Action::Fault(error) => {
                    if self.faulted.insert(idx) {
                        self.violations.push(Violation::Ledger { miner: self.miners[idx].id(), error });
                    }
                }
            }
        }
    }

    fn audit(&mut self, idx: usize, sblock: u64, events: &[LedgerEvent], accounts: Hash256) {
        let mut settled = false;
        for e in events {
            let LedgerEvent::Settled { block, header_hash, .. } = e else { continue };
            settled = true;
            match self.settled_hash.get(&block.seq) {
                Some(h) if h != header_hash => self.violations.push(Violation::ConflictingBlocks { seq: block.seq }),
                Some(_) => {}
                None => {
                    self.settled_hash.insert(block.seq, *header_hash);
                    let b = &self.miners[idx].ledger().chain().blocks[block.seq as usize - 1];
                    self.settled_at.insert(block.seq, (self.now, b.first_seq(), b.last_seq()));
                    let total = self.miners.iter().map(|m| m.stats().attempts).sum();
                    let depth = self.miners.iter().map(|m| m.stats().attempts).max().unwrap_or(0);
                    self.settle_attempts.push(total);
                    self.settle_depth.push(depth);
                }
            }
        }
        if settled {
            match self.digests.get(&sblock) {
                Some(d) if *d != accounts => self.violations.push(Violation::AccountDivergence { sblock }),
                Some(_) => {}
                None => {
                    self.digests.insert(sblock, accounts);
                }
            }
        }
    }

    fn finish(&mut self, completed: bool) -> MetricsReport {
        let covered = self.covered();
        if !completed && self.cfg.expect_completion {
            self.violations.push(Violation::Liveness { covered, needed: self.cfg.workload() });
        }
        if let Some(m) = self.reference_miner() {
            if let Err(failure) = verify_chain(&m.ledger().chain().trimmed()) {
                let miner = m.id();
                self.violations.push(Violation::Audit { miner, failure });
            }
        }
        let mut lat = Vec::new();
        for &(t, first, last) in self.settled_at.values() {
            for s in first..=last {
                if let Some(c) = self.commit_time.get(s as usize) {
                    lat.push(t - c);
                }
            }
        }
        let settled_blocks = self
            .miners
            .iter()
            .zip(&self.honest)
            .filter(|(_, h)| **h)
            .map(|(m, _)| m.ledger().chain().tip_seq())
            .min()
            .unwrap_or(0);
        let stats: Vec<_> = self.miners.iter().map(Miner::stats).collect();
        let rewards = self.sequencer.view().accounts().iter().map(|(id, a)| (*id, a.mining.0)).collect();
        MetricsReport {
            seed: self.cfg.seed,
            completed,
            end_time: self.now,
            committed_sblocks: self.sequencer.view().processed(),
            settled_blocks,
            settled_per_mtick: if self.now == 0 { 0.0 } else { settled_blocks as f64 * 1e6 / self.now as f64 },
            latency: LatencySummary::from_samples(lat),
            shift_histogram: self.shift_histogram.clone(),
            merges: self.merges,
            penalties: self.penalties.clone(),
            total_attempts: stats.iter().map(|s| s.attempts).sum(),
            settle_attempts: self.settle_attempts.clone(),
            settle_depth: self.settle_depth.clone(),
            rewards,
            equivocations: stats.iter().map(|s| s.equivocations).sum(),
            invalid_nonces: stats.iter().map(|s| s.invalid_received).sum(),
            auth_failures: stats.iter().map(|s| s.auth_failures).sum(),
            messages: self.messages,
            violations: self.violations.clone(),
            trace_hash: Hash256(self.trace_hasher.clone().finalize().into()),
            trace_events: self.trace_events,
        }
    }
}

/// Builds and runs one simulation.
pub fn simulate(cfg: SimConfig) -> Result<MetricsReport, SimError> {
    Ok(Simulation::new(cfg)?.run())
}
