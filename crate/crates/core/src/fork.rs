//! Long-range fork experiments.
//!
//! An adversary holding old miners' keys tries to replace `target` blocks
//! starting at `fork_start`. Keys let it sign any certificate it likes, but
//! every replacement block still needs a nonce, and it has to find them alone
//! with hashpower `m` while the honest miners sweep their slices in parallel
//! with combined hashpower `h`. Time is attempts divided by hashpower.

use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::message::{AuthError, BlockRef, KeyRing, NodeId, Payload};
use crate::netsim::rng_stream;
use crate::puzzle::{BlockHeader, Hash256, NonceSpace, PowMode, Puzzle, PuzzleError, SearchBudget};
use crate::slicing::{split, MinerId, Slice};

#[derive(Debug, Clone, PartialEq)]
pub struct ForkParams {
    /// Adversary hashpower, attempts per tick.
    pub m: u64,
    /// Combined honest hashpower, attempts per tick.
    pub h: u64,
    pub n_miners: u32,
    pub fork_start: u64,
    /// Blocks to replace.
    pub target: u64,
    pub nonce_bits: u8,
    pub difficulty: u32,
    pub mode: PowMode,
    pub compromised: Vec<NodeId>,
    pub seed: u64,
}

impl Default for ForkParams {
    fn default() -> Self {
        Self {
            m: 1,
            h: 1,
            n_miners: 4,
            fork_start: 1,
            target: 50,
            nonce_bits: 20,
            difficulty: 10,
            mode: PowMode::Sha256,
            compromised: (0..4).map(|i| NodeId::Miner(MinerId(i))).collect(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ForkError {
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("no compromised miner keys")]
    NoKeys,
    #[error("hashpower and miner count must be positive")]
    Params,
    #[error(transparent)]
    Puzzle(#[from] PuzzleError),
}

/// Fork length next to honest length at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForkSample {
    pub time: f64,
    pub fork_len: u64,
    pub honest_len: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForkReport {
    /// Ticks the honest miners spent building the replaced segment.
    pub honest_time: f64,
    pub honest_work: u64,
    /// Ticks the adversary spent rebuilding it.
    pub adversary_time: f64,
    pub adversary_work: u64,
    /// `adversary_time / honest_time`, to be compared with `h / m`.
    pub ratio: f64,
    pub model_ratio: f64,
    /// Honest chain length when the fork caught up to the old tip.
    pub honest_len_at_finish: u64,
    pub samples: Vec<ForkSample>,
    pub merges: u64,
    pub forged_signatures: u64,
}

fn header(kind: &[u8], seed: u64, seq: u64, prev: Hash256, p: &ForkParams) -> BlockHeader {
    BlockHeader {
        version: 1,
        prev_mined_hash: prev,
        aggregate_root: Hash256::digest_parts(&[b"poc/fork", kind, &seed.to_be_bytes(), &seq.to_be_bytes()]),
        mined_seq: seq,
        difficulty: p.difficulty,
        merge_count: 0,
        nonce: 0,
    }
}

/// Mines one block. Returns (settled header, work, ticks, merges).
fn mine(pz: &Puzzle, mut hd: BlockHeader, slices: &[Slice], power: u64) -> (BlockHeader, u64, f64, u64) {
    let n = slices.len() as u64;
    let mut work = 0;
    let mut ticks = 0.0;
    let mut merges = 0;
    loop {
        // Slices are swept in lockstep, each at power / n.
        let best = slices
            .iter()
            .filter_map(|s| {
                pz.search(&hd, *s, hd.difficulty, SearchBudget::Unbounded).nonce.map(|x| (x - s.start + 1, x))
            })
            .min();
        match best {
            Some((steps, nonce)) => {
                work += steps * n;
                ticks += (steps * n) as f64 / power as f64;
                return (hd.with_nonce(nonce), work, ticks, merges);
            }
            None => {
                let longest = slices.iter().map(Slice::len).max().unwrap_or(0);
                work += longest * n;
                ticks += (longest * n) as f64 / power as f64;
                hd.merge_count += 1;
                merges += 1;
            }
        }
    }
}

/// Honest segment, then the adversary's rebuild racing continued honest growth.
pub fn run_fork_attack(p: &ForkParams) -> Result<ForkReport, ForkError> {
    if p.m == 0 || p.h == 0 || p.n_miners == 0 {
        return Err(ForkError::Params);
    }
    let forger = KeyRing::new(p.seed).enable_compromise().grant_key_compromise(&p.compromised)?;
    let signers: Vec<NodeId> = forger.identities().filter(|n| matches!(n, NodeId::Miner(_))).collect();
    if signers.is_empty() {
        return Err(ForkError::NoKeys);
    }
    let space = NonceSpace::new(p.nonce_bits)?;
    let pz = Puzzle::new(space, p.mode);
    let honest_slices = split(space.size(), &alloc::vec![1; p.n_miners as usize]);
    let full = [space.full()];

    let base = Hash256::digest_parts(&[b"poc/fork-base", &p.seed.to_be_bytes()]);
    let mut prev = base;
    let mut honest_work = 0;
    let mut honest_time = 0.0;
    let mut merges = 0;
    let mut seq = p.fork_start;
    let tip = p.fork_start + p.target;
    while seq < tip {
        let (hd, w, t, mg) = mine(&pz, header(b"honest", p.seed, seq, prev, p), &honest_slices, p.h);
        prev = hd.hash();
        honest_work += w;
        honest_time += t;
        merges += mg;
        seq += 1;
    }

    // Rebuild from the fork point while the honest chain keeps growing.
    let mut honest_len = tip;
    let mut honest_clock = 0.0;
    let mut honest_prev = prev;
    let mut fork_prev = base;
    let mut clock = 0.0;
    let mut adversary_work = 0;
    let mut forged = 0;
    let mut samples = Vec::new();
    for (i, seq) in (p.fork_start..tip).enumerate() {
        let (hd, w, t, mg) = mine(&pz, header(b"forged", p.seed, seq, fork_prev, p), &full, p.m);
        fork_prev = hd.hash();
        adversary_work += w;
        clock += t;
        merges += mg;
        let payload = Payload::NonceFind { block: BlockRef::new(seq, hd.merge_count), nonce: hd.nonce };
        for s in &signers {
            forger.sign_as(*s, payload.clone()).expect("granted key");
            forged += 1;
        }
        while honest_clock < clock {
            let (hh, _, t, _) = mine(&pz, header(b"honest", p.seed, honest_len, honest_prev, p), &honest_slices, p.h);
            honest_prev = hh.hash();
            honest_clock += t;
            if honest_clock <= clock {
                honest_len += 1;
            }
        }
        samples.push(ForkSample { time: clock, fork_len: p.fork_start + i as u64 + 1, honest_len });
    }

    Ok(ForkReport {
        honest_time,
        honest_work,
        adversary_time: clock,
        adversary_work,
        ratio: clock / honest_time,
        model_ratio: p.h as f64 / p.m as f64,
        honest_len_at_finish: honest_len,
        samples,
        merges,
        forged_signatures: forged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreakParams {
    pub n_slices: u32,
    /// Slice positions the adversary mines.
    pub adversary: Vec<usize>,
    pub nonce_bits: u8,
    pub difficulty: u32,
    pub trials: u32,
    /// Longest streak measured.
    pub max_len: u32,
    pub mode: PowMode,
    pub seed: u64,
}

impl Default for StreakParams {
    fn default() -> Self {
        Self {
            n_slices: 8,
            adversary: alloc::vec![0, 2, 4, 6],
            nonce_bits: 15,
            difficulty: 8,
            trials: 3000,
            max_len: 5,
            mode: PowMode::Modeled,
            seed: 1,
        }
    }
}

/// `freq[b]` is the fraction of trials in which the adversary produced the
/// first `b` consecutive blocks; `freq[0] = 1`.
///
/// Each block goes to whoever reaches a valid nonce first when all slices
/// are swept in lockstep; equal step counts are broken uniformly at random.
/// Blocks whose space has no valid nonce are merged and mined again.
pub fn success_streaks(p: &StreakParams) -> Result<Vec<f64>, ForkError> {
    if p.n_slices == 0 {
        return Err(ForkError::Params);
    }
    let space = NonceSpace::new(p.nonce_bits)?;
    let pz = Puzzle::new(space, p.mode);
    let slices = split(space.size(), &alloc::vec![1; p.n_slices as usize]);
    let mut rng = rng_stream(p.seed, "streaks");
    let mut hits = alloc::vec![0u64; p.max_len as usize + 1];
    for trial in 0..p.trials {
        let mut prev = Hash256::digest_parts(&[b"poc/streak", &p.seed.to_be_bytes(), &trial.to_be_bytes()]);
        let mut streak = 0;
        while streak < p.max_len {
            let mut hd = BlockHeader {
                version: 1,
                prev_mined_hash: prev,
                aggregate_root: Hash256::digest_parts(&[b"poc/streak-root", prev.as_bytes()]),
                mined_seq: streak as u64 + 1,
                difficulty: p.difficulty,
                merge_count: 0,
                nonce: 0,
            };
            let (winner, nonce) = loop {
                let found: Vec<(u64, usize, u64)> = slices
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| {
                        pz.search(&hd, *s, p.difficulty, SearchBudget::Unbounded).nonce.map(|x| (x - s.start, i, x))
                    })
                    .collect();
                let Some(best) = found.iter().map(|f| f.0).min() else {
                    hd.merge_count += 1;
                    continue;
                };
                let tied: Vec<_> = found.iter().filter(|f| f.0 == best).collect();
                let pick = tied[rng.gen_range(0..tied.len())];
                break (pick.1, pick.2);
            };
            if !p.adversary.contains(&winner) {
                break;
            }
            prev = hd.with_nonce(nonce).hash();
            streak += 1;
        }
        for h in hits.iter_mut().take(streak as usize + 1) {
            *h += 1;
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / p.trials as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needs_granted_keys() {
        let p = ForkParams { compromised: alloc::vec![], target: 2, ..Default::default() };
        assert_eq!(run_fork_attack(&p), Err(ForkError::NoKeys));
        let p = ForkParams { m: 0, ..Default::default() };
        assert_eq!(run_fork_attack(&p), Err(ForkError::Params));
    }

    #[test]
    fn rebuild_is_deterministic_and_signed() {
        let p = ForkParams { target: 10, ..Default::default() };
        let a = run_fork_attack(&p).unwrap();
        assert_eq!(a, run_fork_attack(&p).unwrap());
        assert_eq!(a.forged_signatures, 40);
        assert_eq!(a.samples.len(), 10);
        assert!(a.samples.windows(2).all(|w| w[0].time <= w[1].time && w[0].honest_len <= w[1].honest_len));
    }

    #[test]
    fn weaker_adversary_takes_longer() {
        let mut slow = 0.0;
        let mut even = 0.0;
        for seed in 0..4 {
            even += run_fork_attack(&ForkParams { target: 40, seed, ..Default::default() }).unwrap().ratio;
            slow += run_fork_attack(&ForkParams { target: 40, seed, m: 1, h: 4, ..Default::default() }).unwrap().ratio;
        }
        assert!(slow > 2.0 * even, "{slow} vs {even}");
    }

    #[test]
    fn streaks_start_at_one_and_never_grow() {
        let f = success_streaks(&StreakParams { trials: 200, ..Default::default() }).unwrap();
        assert_eq!(f[0], 1.0);
        assert!(f.windows(2).all(|w| w[1] <= w[0]));
        let none =
            success_streaks(&StreakParams { trials: 50, adversary: alloc::vec![], ..Default::default() }).unwrap();
        assert_eq!(none[1], 0.0);
    }
}
