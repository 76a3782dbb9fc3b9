//! Staking and mining accounts, the genesis record, rewards and penalties.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::chain::RewardTx;
use crate::codec::Encoder;
use crate::message::{KeyRing, NodeId};
use crate::puzzle::{Hash256, NonceSpace, PowMode};
use crate::slicing::{partition, MinerId, Slice, SliceError, SliceTable};

/// Whole token units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TokenAmount(pub u64);

impl TokenAmount {
    pub const ZERO: Self = Self(0);

    pub fn checked_add(self, other: Self) -> Result<Self, AccountError> {
        self.0.checked_add(other.0).map(Self).ok_or(AccountError::Overflow)
    }

    pub fn saturating_sub(self, other: Self) -> Self {
        Self(self.0.saturating_sub(other.0))
    }
}

impl fmt::Display for TokenAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccountError {
    #[error("token arithmetic overflow")]
    Overflow,
    #[error("miner {miner} stakes {stake}, below the minimum {min}")]
    Understaked { miner: MinerId, stake: u64, min: u64 },
    #[error("unknown miner {0}")]
    UnknownMiner(MinerId),
    #[error("miner {0} already has an account")]
    Exists(MinerId),
    #[error(transparent)]
    Slice(#[from] SliceError),
}

/// `e`, `Ψ_s`, per-block reward and per-culprit penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccountParams {
    pub min_stake_multiple: u64,
    pub unit_stake: u64,
    pub block_reward: u64,
    pub penalty: u64,
}

impl Default for AccountParams {
    fn default() -> Self {
        Self { min_stake_multiple: 1, unit_stake: 100, block_reward: 1000, penalty: 50 }
    }
}

impl AccountParams {
    /// `e · Ψ_s`, saturating.
    pub fn min_stake(&self) -> u64 {
        self.min_stake_multiple.saturating_mul(self.unit_stake)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Active,
    /// Left the slice table; stake still locked until pending penalties land.
    Leaving,
    /// Left, stake released.
    Left,
    /// Removed after a penalty took the stake below the minimum.
    Ejected,
}

impl Status {
    fn code(self) -> u8 {
        match self {
            Status::Active => 0,
            Status::Leaving => 1,
            Status::Left => 2,
            Status::Ejected => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Account {
    pub stake: TokenAmount,
    pub mining: TokenAmount,
    pub status: Status,
    /// Set when a penalty drops the stake below the minimum; acted on at the
    /// next block boundary.
    pub eject_pending: bool,
}

impl Account {
    pub fn new(stake: u64) -> Self {
        Self { stake: TokenAmount(stake), mining: TokenAmount::ZERO, status: Status::Active, eject_pending: false }
    }

    pub fn total(&self) -> u64 {
        self.stake.0.saturating_add(self.mining.0)
    }
}

/// Outcome of a join or leave request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reconfig {
    Applied(SliceTable),
    /// No counterparty for the slice; kept aside, not an error.
    Parked,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AccountDb {
    params: AccountParams,
    accounts: BTreeMap<MinerId, Account>,
}

impl AccountDb {
    pub fn new(params: AccountParams) -> Self {
        Self { params, accounts: BTreeMap::new() }
    }

    pub fn params(&self) -> &AccountParams {
        &self.params
    }

    pub fn get(&self, id: MinerId) -> Option<&Account> {
        self.accounts.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MinerId, &Account)> {
        self.accounts.iter()
    }

    pub fn len(&self) -> usize {
        self.accounts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accounts.is_empty()
    }

    /// Opens a locked account. Rejects stakes below `e · Ψ_s`.
    pub fn open(&mut self, id: MinerId, stake: u64) -> Result<(), AccountError> {
        let min = self.params.min_stake();
        if stake < min {
            return Err(AccountError::Understaked { miner: id, stake, min });
        }
        if self.accounts.contains_key(&id) {
            return Err(AccountError::Exists(id));
        }
        self.accounts.insert(id, Account::new(stake));
        Ok(())
    }

    /// Credits each reward transaction to its miner's mining account.
    pub fn apply_rewards(&mut self, txns: &[RewardTx]) -> Result<(), AccountError> {
        for tx in txns {
            if let Some(a) = self.accounts.get_mut(&tx.miner) {
                a.mining = a.mining.checked_add(TokenAmount(tx.amount))?;
            }
        }
        Ok(())
    }

    /// Debits `Ψ_p` from each culprit, stake first, then mining, floored at zero.
    ///
    /// Returns the culprits whose stake fell below the minimum. An unknown id
    /// rejects the whole certificate and leaves the database untouched.
    pub fn apply_penalty(&mut self, culprits: &[MinerId]) -> Result<Vec<MinerId>, AccountError> {
        if let Some(&c) = culprits.iter().find(|c| !self.accounts.contains_key(c)) {
            return Err(AccountError::UnknownMiner(c));
        }
        let p = self.params.penalty;
        let min = self.params.min_stake();
        let mut ejected = Vec::new();
        for c in culprits {
            let a = self.accounts.get_mut(c).unwrap();
            let from_stake = p.min(a.stake.0);
            a.stake.0 -= from_stake;
            a.mining = a.mining.saturating_sub(TokenAmount(p - from_stake));
            if a.stake.0 < min && a.status == Status::Active && !a.eject_pending {
                a.eject_pending = true;
                ejected.push(*c);
            }
        }
        Ok(ejected)
    }

    /// Removes a flagged miner's slice at a block boundary.
    pub fn eject(&mut self, table: &SliceTable, id: MinerId) -> Result<SliceTable, AccountError> {
        let a = self.accounts.get_mut(&id).ok_or(AccountError::UnknownMiner(id))?;
        let t = table.remove(id)?;
        a.status = Status::Ejected;
        a.eject_pending = false;
        Ok(t)
    }

    /// Admits a new miner that buys `range` from `seller`.
    pub fn process_join(
        &mut self,
        table: &SliceTable,
        miner: MinerId,
        stake: u64,
        seller: Option<MinerId>,
        range: Slice,
    ) -> Result<Reconfig, AccountError> {
        let min = self.params.min_stake();
        if stake < min {
            return Err(AccountError::Understaked { miner, stake, min });
        }
        if self.accounts.contains_key(&miner) {
            return Err(AccountError::Exists(miner));
        }
        let Some(seller) = seller else {
            return Ok(Reconfig::Parked);
        };
        let t = table.transfer_slice(seller, miner, range)?;
        self.accounts.insert(miner, Account::new(stake));
        if t.get(seller).is_none() {
            self.mark_leaving(seller);
        }
        Ok(Reconfig::Applied(t))
    }

    /// Hands `miner`'s whole slice to `buyer` and locks it out of mining.
    /// The stake stays locked until [`AccountDb::release`].
    pub fn process_leave(
        &mut self,
        table: &SliceTable,
        miner: MinerId,
        buyer: Option<MinerId>,
    ) -> Result<Reconfig, AccountError> {
        if !self.accounts.contains_key(&miner) {
            return Err(AccountError::UnknownMiner(miner));
        }
        let Some(buyer) = buyer else {
            return Ok(Reconfig::Parked);
        };
        if !self.accounts.contains_key(&buyer) {
            return Err(AccountError::UnknownMiner(buyer));
        }
        let s = table.get(miner).ok_or(SliceError::UnknownMiner(miner))?;
        let t = if s.is_empty() { table.remove(miner)? } else { table.transfer_slice(miner, buyer, s)? };
        self.mark_leaving(miner);
        Ok(Reconfig::Applied(t))
    }

    fn mark_leaving(&mut self, id: MinerId) {
        if let Some(a) = self.accounts.get_mut(&id) {
            if a.status == Status::Active {
                a.status = Status::Leaving;
            }
        }
    }

    /// Unlocks a leaver's stake.
    pub fn release(&mut self, id: MinerId) -> bool {
        match self.accounts.get_mut(&id) {
            Some(a) if a.status == Status::Leaving => {
                a.status = Status::Left;
                true
            }
            _ => false,
        }
    }

    pub fn leaving(&self) -> impl Iterator<Item = MinerId> + '_ {
        self.accounts.iter().filter(|(_, a)| a.status == Status::Leaving).map(|(&id, _)| id)
    }

    pub fn pending_ejections(&self) -> Vec<MinerId> {
        self.accounts.iter().filter(|(_, a)| a.eject_pending).map(|(&id, _)| id).collect()
    }

    /// SHA-256 over the accounts in id order.
    pub fn state_digest(&self) -> Hash256 {
        let mut e = Encoder::new();
        e.tag(b"poc/accounts").u32(self.accounts.len() as u32);
        for (id, a) in &self.accounts {
            e.u32(id.0).u64(a.stake.0).u64(a.mining.0).u8(a.status.code()).u8(a.eject_pending as u8);
        }
        e.digest()
    }
}

/// One reward transaction per slice, proportional to slice size.
///
/// `floor(|S_i| · ◇ / |S|)` each, with the leftover units going one each to
/// the lowest ids, so the amounts always sum to exactly `◇`.
pub fn reward_txns(table: &SliceTable, reward: u64) -> Vec<RewardTx> {
    let sizes: Vec<u64> = table.entries().iter().map(|e| e.1.len()).collect();
    table
        .entries()
        .iter()
        .zip(reward_shares(&sizes, table.space().size(), reward))
        .map(|(&(miner, _), amount)| RewardTx { miner, amount })
        .collect()
}

/// `floor(size_i · reward / total)` plus one leftover unit each for the first entries.
pub fn reward_shares(sizes: &[u64], total: u64, reward: u64) -> Vec<u64> {
    let mut out: Vec<u64> = sizes.iter().map(|&s| (s as u128 * reward as u128 / total as u128) as u64).collect();
    let paid: u64 = out.iter().sum();
    for a in out.iter_mut().take((reward - paid) as usize) {
        *a += 1;
    }
    out
}

/// Credits `◇` across the slice table.
pub fn distribute_rewards(db: &mut AccountDb, table: &SliceTable, reward: u64) -> Result<(), AccountError> {
    db.apply_rewards(&reward_txns(table, reward))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GenesisMiner {
    pub id: MinerId,
    pub staking_key: Hash256,
    pub mining_key: Hash256,
    pub stake: u64,
    pub slice: Slice,
}

/// Block 0 of the mined chain: protocol constants plus the initial miners.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GenesisRecord {
    pub version: u32,
    pub nonce_bits: u8,
    pub pow_mode: PowMode,
    pub difficulty: u32,
    pub sigma: u32,
    pub n_replicas: u32,
    pub f_miners: u32,
    pub block_reward: u64,
    pub miners: Vec<GenesisMiner>,
}

impl GenesisRecord {
    pub fn n_miners(&self) -> usize {
        self.miners.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.tag(b"poc/genesis")
            .u32(self.version)
            .u8(self.nonce_bits)
            .u8(match self.pow_mode {
                PowMode::Sha256 => 0,
                PowMode::Modeled => 1,
            })
            .u32(self.difficulty)
            .u32(self.sigma)
            .u32(self.n_replicas)
            .u32(self.f_miners)
            .u64(self.block_reward)
            .u32(self.miners.len() as u32);
        for m in &self.miners {
            e.u32(m.id.0).hash(&m.staking_key).hash(&m.mining_key).u64(m.stake).u64(m.slice.start).u64(m.slice.end);
        }
        e.finish()
    }

    pub fn hash(&self) -> Hash256 {
        Hash256::digest(&self.encode())
    }

    /// The slice table the record describes.
    pub fn table(&self) -> Result<SliceTable, SliceError> {
        let space = NonceSpace::new(self.nonce_bits).map_err(|_| SliceError::Broken("bad nonce width"))?;
        SliceTable::from_entries(space, self.miners.iter().map(|m| (m.id, m.slice)).collect())
    }
}

/// Protocol constants copied into the genesis record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenesisParams {
    pub version: u32,
    pub space: NonceSpace,
    pub pow_mode: PowMode,
    pub difficulty: u32,
    pub sigma: u32,
    pub n_replicas: u32,
    pub f_miners: u32,
}

/// Builds the genesis record, the locked accounts and the initial slice table.
pub fn init_genesis(
    stakes: &[(MinerId, u64)],
    keys: &KeyRing,
    params: AccountParams,
    g: GenesisParams,
) -> Result<(GenesisRecord, AccountDb, SliceTable), AccountError> {
    let mut db = AccountDb::new(params);
    for &(id, stake) in stakes {
        db.open(id, stake)?;
    }
    let table = partition(g.space, stakes)?;
    let miners = table
        .entries()
        .iter()
        .map(|&(id, slice)| GenesisMiner {
            id,
            staking_key: keys.public_key(NodeId::Miner(id), b"staking"),
            mining_key: keys.public_key(NodeId::Miner(id), b"mining"),
            stake: db.get(id).unwrap().stake.0,
            slice,
        })
        .collect();
    let record = GenesisRecord {
        version: g.version,
        nonce_bits: g.space.bits(),
        pow_mode: g.pow_mode,
        difficulty: g.difficulty,
        sigma: g.sigma,
        n_replicas: g.n_replicas,
        f_miners: g.f_miners,
        block_reward: params.block_reward,
        miners,
    };
    Ok((record, db, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn params() -> AccountParams {
        AccountParams { min_stake_multiple: 2, unit_stake: 10, block_reward: 30, penalty: 30 }
    }

    fn gp(bits: u8) -> GenesisParams {
        GenesisParams {
            version: 1,
            space: NonceSpace::new(bits).unwrap(),
            pow_mode: PowMode::Sha256,
            difficulty: 4,
            sigma: 1,
            n_replicas: 4,
            f_miners: 1,
        }
    }

    fn stakes(v: &[u64]) -> Vec<(MinerId, u64)> {
        v.iter().enumerate().map(|(i, &s)| (MinerId(i as u32), s)).collect()
    }

    #[test]
    fn equal_genesis_is_symmetric() {
        let (g, db, t) = init_genesis(&stakes(&[50, 50, 50]), &KeyRing::new(1), params(), gp(6)).unwrap();
        assert_eq!(g.n_miners(), 3);
        let a: Vec<_> = db.iter().map(|(_, a)| *a).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(t.entries().iter().map(|e| e.1.len()).collect::<Vec<_>>(), vec![22, 21, 21]);
        assert_eq!(g.table().unwrap(), t);
        assert_ne!(g.miners[0].staking_key, g.miners[0].mining_key);
    }

    #[test]
    fn understaked_genesis_rejected() {
        let err = init_genesis(&stakes(&[50, 19]), &KeyRing::new(1), params(), gp(4)).unwrap_err();
        assert_eq!(err, AccountError::Understaked { miner: MinerId(1), stake: 19, min: 20 });
    }

    #[test]
    fn weighted_genesis_slices() {
        // floor gives (2, 5, 8); the one spare unit goes to the lowest id
        let (_, _, t) = init_genesis(&stakes(&[20, 40, 60]), &KeyRing::new(1), params(), gp(4)).unwrap();
        assert_eq!(t.entries().iter().map(|e| e.1.len()).collect::<Vec<_>>(), vec![3, 5, 8]);
    }

    #[test]
    fn reward_examples() {
        let space = NonceSpace::new(3).unwrap();
        let t = SliceTable::from_entries(
            space,
            vec![(MinerId(0), Slice::new(0, 2)), (MinerId(1), Slice::new(2, 4)), (MinerId(2), Slice::new(4, 8))],
        )
        .unwrap();
        let amounts = |r| reward_txns(&t, r).iter().map(|x| x.amount).collect::<Vec<_>>();
        assert_eq!(amounts(32), vec![8, 8, 16]);
        // 30 over (2,2,4)/8 floors to (7,7,15); the one spare unit goes to id 0
        assert_eq!(amounts(30), vec![8, 7, 15]);
        assert_eq!(amounts(0), vec![0, 0, 0]);

        let mut db = AccountDb::new(params());
        for i in 0..3 {
            db.open(MinerId(i), 20).unwrap();
        }
        let before = db.clone();
        distribute_rewards(&mut db, &t, 0).unwrap();
        assert_eq!(db, before);
    }

    #[test]
    fn reward_shares_by_slice_size() {
        assert_eq!(reward_shares(&[2, 2, 2], 6, 30), vec![10, 10, 10]);
        assert_eq!(reward_shares(&[1, 2, 3], 6, 30), vec![5, 10, 15]);
        assert_eq!(reward_shares(&[1, 1, 1], 3, 2), vec![1, 1, 0]);
    }

    #[test]
    fn penalty_examples() {
        let mut db = AccountDb::new(AccountParams { penalty: 30, ..params() });
        db.open(MinerId(0), 100).unwrap();
        db.open(MinerId(1), 20).unwrap();
        assert_eq!(db.apply_penalty(&[MinerId(0)]).unwrap(), vec![]);
        assert_eq!(db.get(MinerId(0)).unwrap().stake, TokenAmount(70));

        // force stake 10, mining 5
        db.accounts.get_mut(&MinerId(1)).unwrap().stake = TokenAmount(10);
        db.accounts.get_mut(&MinerId(1)).unwrap().mining = TokenAmount(5);
        assert_eq!(db.apply_penalty(&[MinerId(1)]).unwrap(), vec![MinerId(1)]);
        let a = db.get(MinerId(1)).unwrap();
        assert_eq!((a.stake, a.mining, a.eject_pending), (TokenAmount(0), TokenAmount(0), true));

        let before = db.clone();
        assert_eq!(db.apply_penalty(&[]).unwrap(), vec![]);
        assert_eq!(db, before);
        assert_eq!(db.apply_penalty(&[MinerId(0), MinerId(9)]), Err(AccountError::UnknownMiner(MinerId(9))));
        assert_eq!(db, before);
    }

    #[test]
    fn join_and_leave() {
        let (_, mut db, t) = init_genesis(&stakes(&[20, 20]), &KeyRing::new(3), params(), gp(4)).unwrap();
        assert_eq!(
            db.process_join(&t, MinerId(5), 19, Some(MinerId(0)), Slice::new(0, 8)),
            Err(AccountError::Understaked { miner: MinerId(5), stake: 19, min: 20 })
        );
        assert_eq!(db.process_join(&t, MinerId(5), 20, None, Slice::new(0, 8)), Ok(Reconfig::Parked));
        let Reconfig::Applied(t2) = db.process_join(&t, MinerId(5), 20, Some(MinerId(0)), Slice::new(0, 8)).unwrap()
        else {
            panic!("join parked")
        };
        assert_eq!(t2.len(), 2);
        assert_eq!(db.get(MinerId(5)).unwrap().status, Status::Active);
        assert_eq!(db.get(MinerId(0)).unwrap().status, Status::Leaving);

        assert_eq!(db.process_leave(&t2, MinerId(1), None), Ok(Reconfig::Parked));
        let Reconfig::Applied(t3) = db.process_leave(&t2, MinerId(1), Some(MinerId(5))).unwrap() else {
            panic!("leave parked")
        };
        assert_eq!(t3.entries(), &[(MinerId(5), Slice::new(0, 16))]);
        assert!(db.release(MinerId(1)));
        assert!(!db.release(MinerId(1)));
        assert_eq!(db.get(MinerId(1)).unwrap().status, Status::Left);
    }

    #[test]
    fn ejection_hands_slice_to_neighbor() {
        let (_, mut db, t) = init_genesis(&stakes(&[20, 20, 20]), &KeyRing::new(3), params(), gp(4)).unwrap();
        assert_eq!(db.apply_penalty(&[MinerId(1)]).unwrap(), vec![MinerId(1)]);
        assert_eq!(db.pending_ejections(), vec![MinerId(1)]);
        let t2 = db.eject(&t, MinerId(1)).unwrap();
        assert_eq!(t2.get(MinerId(0)), Some(Slice::new(0, 11)));
        assert_eq!(db.get(MinerId(1)).unwrap().status, Status::Ejected);
        assert!(db.pending_ejections().is_empty());
    }

    #[test]
    fn digests() {
        let mk = || init_genesis(&stakes(&[20, 30]), &KeyRing::new(4), params(), gp(4)).unwrap().1;
        let (a, mut b) = (mk(), mk());
        assert_eq!(a.state_digest(), b.state_digest());
        b.apply_rewards(&[RewardTx { miner: MinerId(1), amount: 1 }]).unwrap();
        assert_ne!(a.state_digest(), b.state_digest());
    }

    #[test]
    fn overflow_is_checked() {
        let mut db = AccountDb::new(params());
        db.open(MinerId(0), 20).unwrap();
        db.apply_rewards(&[RewardTx { miner: MinerId(0), amount: u64::MAX }]).unwrap();
        assert_eq!(db.apply_rewards(&[RewardTx { miner: MinerId(0), amount: 1 }]), Err(AccountError::Overflow));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rewards_conserve(bits in 1u8..=20, weights in proptest::collection::vec(1u64..1000, 1..20), reward in 0u64..1_000_000) {
                let list = stakes(&weights);
                let t = partition(NonceSpace::new(bits).unwrap(), &list).unwrap();
                let tx = reward_txns(&t, reward);
                prop_assert_eq!(tx.len(), t.len());
                prop_assert_eq!(tx.iter().map(|x| x.amount).sum::<u64>(), reward);
            }

            #[test]
            fn penalties_never_increase_holdings(stake in 20u64..500, mining in 0u64..500, p in 0u64..600) {
                let mut db = AccountDb::new(AccountParams { penalty: p, ..params() });
                db.open(MinerId(0), stake).unwrap();
                db.apply_rewards(&[RewardTx { miner: MinerId(0), amount: mining }]).unwrap();
                let before = db.get(MinerId(0)).unwrap().total();
                db.apply_penalty(&[MinerId(0)]).unwrap();
                let after = db.get(MinerId(0)).unwrap().total();
                prop_assert_eq!(after, before.saturating_sub(p));
            }
        }
    }
}
