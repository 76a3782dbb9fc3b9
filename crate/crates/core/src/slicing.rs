//! Stake-weighted partition of the nonce space.
//!
//! Every active miner owns one contiguous slice. Slices are indexed by the
//! miner's position in the id-ordered table; in shift round `r` the miner at
//! position `i` searches slice `(i + r) mod n`.

use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::puzzle::NonceSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MinerId(pub u32);

impl fmt::Display for MinerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Half-open nonce range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Slice {
    pub start: u64,
    pub end: u64,
}

impl Slice {
    pub fn new(start: u64, end: u64) -> Self {
        debug_assert!(start <= end, "inverted slice {start}..{end}");
        Self { start, end }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, nonce: u64) -> bool {
        self.start <= nonce && nonce < self.end
    }

    pub fn covers(&self, other: &Slice) -> bool {
        other.is_empty() || (self.start <= other.start && other.end <= self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SliceError {
    #[error("no miners given")]
    NoMiners,
    #[error("miner {0} has zero stake")]
    ZeroStake(MinerId),
    #[error("miner {0} listed twice")]
    DuplicateMiner(MinerId),
    #[error("unknown miner {0}")]
    UnknownMiner(MinerId),
    #[error("range {start}..{end} is not inside the seller's slice")]
    NotContained { start: u64, end: u64 },
    #[error("a partial sale must be a prefix or suffix of the seller's slice")]
    NotAnEnd,
    #[error("buyer {0} already owns a slice that does not touch the sold range")]
    NotAdjacent(MinerId),
    #[error("cannot remove the last miner")]
    LastMiner,
    #[error("table does not partition the nonce space: {0}")]
    Broken(&'static str),
}

/// Which miners a penalty names for shift round `r` on nonce slice `o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PenaltyRule {
    /// Miners that actually held slice `o` in rounds `0..r`.
    #[default]
    Holders,
    /// `(o + l - 1) mod n`, kept for comparison only. Names honest miners.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SliceTable {
    space: NonceSpace,
    entries: Vec<(MinerId, Slice)>,
}

/// Splits `space` into one slice per miner, sized by stake.
///
/// Each miner gets `floor(size * stake / total)`; the units lost to flooring
/// go one each to the lowest ids. Slices are laid out in ascending id order.
pub fn partition(space: NonceSpace, stakes: &[(MinerId, u64)]) -> Result<SliceTable, SliceError> {
    if stakes.is_empty() {
        return Err(SliceError::NoMiners);
    }
    let mut sorted = stakes.to_vec();
    sorted.sort_by_key(|&(id, _)| id);
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(SliceError::DuplicateMiner(w[0].0));
        }
    }
    if let Some(&(id, _)) = sorted.iter().find(|&&(_, s)| s == 0) {
        return Err(SliceError::ZeroStake(id));
    }
    let weights: Vec<u64> = sorted.iter().map(|&(_, s)| s).collect();
    let entries = sorted.iter().map(|&(id, _)| id).zip(split(space.size(), &weights)).collect();
    Ok(SliceTable { space, entries })
}

/// Lays out `[0, size)` as contiguous ranges proportional to `weights`.
///
/// Flooring loses strictly less than one unit per weight; the leftover units
/// go one each to the first entries.
pub fn split(size: u64, weights: &[u64]) -> Vec<Slice> {
    let total: u128 = weights.iter().map(|&w| w as u128).sum();
    assert!(total > 0, "weights sum to zero");
    let mut lens: Vec<u64> = weights.iter().map(|&w| (size as u128 * w as u128 / total) as u64).collect();
    let remainder = (size - lens.iter().sum::<u64>()) as usize;
    for l in lens.iter_mut().take(remainder) {
        *l += 1;
    }
    let mut start = 0;
    lens.into_iter()
        .map(|len| {
            let s = Slice::new(start, start + len);
            start += len;
            s
        })
        .collect()
}

/// Slice index searched by position `i` in shift round `r`.
pub fn slice_index_for(i: usize, r: u32, n: usize) -> usize {
    debug_assert!(i < n);
    ((i as u64 + r as u64) % n as u64) as usize
}

/// Positions that held slice `o` during rounds `0..r`: `{(o - l + 1) mod n : l in 1..=r}`.
pub fn penalty_set(o: usize, r: u32, n: usize) -> Vec<usize> {
    penalty_set_with(o, r, n, PenaltyRule::Holders)
}

pub fn penalty_set_with(o: usize, r: u32, n: usize, rule: PenaltyRule) -> Vec<usize> {
    let n64 = n as u64;
    let o = o as u64 % n64;
    let mut out: Vec<usize> = (1..=r as u64)
        .map(|l| {
            let p = match rule {
                PenaltyRule::Holders => (o + n64 - (l - 1) % n64) % n64,
                PenaltyRule::Literal => (o + l - 1) % n64,
            };
            p as usize
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

impl SliceTable {
    /// Equal stakes for every id.
    pub fn equal(space: NonceSpace, ids: &[MinerId]) -> Result<Self, SliceError> {
        let stakes: Vec<_> = ids.iter().map(|&id| (id, 1)).collect();
        partition(space, &stakes)
    }

    /// Builds a table from explicit entries, checking the partition law.
    pub fn from_entries(space: NonceSpace, mut entries: Vec<(MinerId, Slice)>) -> Result<Self, SliceError> {
        entries.sort_by_key(|&(id, _)| id);
        let t = Self { space, entries };
        t.validate()?;
        Ok(t)
    }

    pub fn space(&self) -> NonceSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(miner, slice)` pairs in ascending id order.
    pub fn entries(&self) -> &[(MinerId, Slice)] {
        &self.entries
    }

    pub fn miners(&self) -> impl Iterator<Item = MinerId> + '_ {
        self.entries.iter().map(|&(id, _)| id)
    }

    pub fn position(&self, id: MinerId) -> Option<usize> {
        self.entries.binary_search_by_key(&id, |&(m, _)| m).ok()
    }

    pub fn get(&self, id: MinerId) -> Option<Slice> {
        self.position(id).map(|p| self.entries[p].1)
    }

    pub fn at(&self, index: usize) -> (MinerId, Slice) {
        self.entries[index]
    }

    /// The slice `id` searches in shift round `r`, with its index.
    pub fn slice_for_round(&self, id: MinerId, r: u32) -> Option<(usize, Slice)> {
        let i = self.position(id)?;
        let j = slice_index_for(i, r, self.len());
        Some((j, self.entries[j].1))
    }

    /// Index of the slice containing `nonce`.
    pub fn index_of_nonce(&self, nonce: u64) -> Option<usize> {
        self.entries.iter().position(|(_, s)| s.contains(nonce))
    }

    /// Miners named by a penalty for a nonce found in slice `o` after `r` shifts.
    pub fn penalty_miners(&self, o: usize, r: u32, rule: PenaltyRule) -> Vec<MinerId> {
        let mut ids: Vec<MinerId> =
            penalty_set_with(o, r, self.len(), rule).into_iter().map(|p| self.entries[p].0).collect();
        ids.sort_unstable();
        ids
    }

    /// Checks ordering, disjointness and exact coverage.
    pub fn validate(&self) -> Result<(), SliceError> {
        if self.entries.is_empty() {
            return Err(SliceError::Broken("no entries"));
        }
        if self.entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(SliceError::Broken("entries not strictly ordered by miner id"));
        }
        let mut by_addr: Vec<Slice> = self.entries.iter().map(|&(_, s)| s).collect();
        by_addr.sort_unstable();
        let mut next = 0;
        for s in by_addr {
            if s.start > s.end {
                return Err(SliceError::Broken("inverted slice"));
            }
            if s.start != next {
                return Err(SliceError::Broken(if s.start < next { "overlap" } else { "gap" }));
            }
            next = s.end;
        }
        if next != self.space.size() {
            return Err(SliceError::Broken("slices do not reach the end of the space"));
        }
        Ok(())
    }

    /// Moves `range` from `seller` to `buyer`.
    ///
    /// Each miner keeps a single contiguous slice, so a partial sale must be
    /// a prefix or suffix, and a buyer that already mines must border the
    /// sold range. Selling the whole slice removes the seller.
    pub fn transfer_slice(&self, seller: MinerId, buyer: MinerId, range: Slice) -> Result<Self, SliceError> {
        let sp = self.position(seller).ok_or(SliceError::UnknownMiner(seller))?;
        let owned = self.entries[sp].1;
        if range.is_empty() || seller == buyer {
            return Ok(self.clone());
        }
        if !owned.covers(&range) {
            return Err(SliceError::NotContained { start: range.start, end: range.end });
        }
        let whole = range == owned;
        let remainder = if whole {
            None
        } else if range.start == owned.start {
            Some(Slice::new(range.end, owned.end))
        } else if range.end == owned.end {
            Some(Slice::new(owned.start, range.start))
        } else {
            return Err(SliceError::NotAnEnd);
        };

        let mut entries = self.entries.clone();
        match self.position(buyer) {
            Some(bp) => {
                let b = entries[bp].1;
                let merged = if b.end == range.start {
                    Slice::new(b.start, range.end)
                } else if b.start == range.end {
                    Slice::new(range.start, b.end)
                } else {
                    return Err(SliceError::NotAdjacent(buyer));
                };
                entries[bp].1 = merged;
            }
            None => entries.push((buyer, range)),
        }
        match remainder {
            Some(rest) => entries.iter_mut().find(|(id, _)| *id == seller).unwrap().1 = rest,
            None => entries.retain(|(id, _)| *id != seller),
        }
        Self::from_entries(self.space, entries)
    }

    /// Removes `id`, handing its slice to the miner just below it in the
    /// nonce space (or just above, if it owns the lowest range).
    pub fn remove(&self, id: MinerId) -> Result<Self, SliceError> {
        let s = self.get(id).ok_or(SliceError::UnknownMiner(id))?;
        if self.len() == 1 {
            return Err(SliceError::LastMiner);
        }
        let heir = self.neighbor(id).expect("a partition with two miners has a neighbor");
        if s.is_empty() {
            let mut entries = self.entries.clone();
            entries.retain(|(m, _)| *m != id);
            return Self::from_entries(self.space, entries);
        }
        self.transfer_slice(id, heir, s)
    }

    /// The adjacent miner that inherits `id`'s slice on removal.
    pub fn neighbor(&self, id: MinerId) -> Option<MinerId> {
        let mut addr: Vec<(Slice, MinerId)> = self.entries.iter().map(|&(m, s)| (s, m)).collect();
        addr.sort_unstable();
        let k = addr.iter().position(|&(_, m)| m == id)?;
        if k > 0 {
            Some(addr[k - 1].1)
        } else {
            addr.get(1).map(|&(_, m)| m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn space(bits: u8) -> NonceSpace {
        NonceSpace::new(bits).unwrap()
    }

    fn ids(n: u32) -> Vec<MinerId> {
        (0..n).map(MinerId).collect()
    }

    fn sizes(t: &SliceTable) -> Vec<u64> {
        t.entries().iter().map(|(_, s)| s.len()).collect()
    }

    #[test]
    fn three_equal_miners() {
        assert_eq!(split(6, &[1, 1, 1]), vec![Slice::new(0, 2), Slice::new(2, 4), Slice::new(4, 6)]);
        let t = SliceTable::equal(space(3), &ids(3)).unwrap();
        assert_eq!(sizes(&t), vec![3, 3, 2]);
    }

    #[test]
    fn single_miner_owns_everything() {
        let t = SliceTable::equal(space(10), &ids(1)).unwrap();
        assert_eq!(t.entries(), &[(MinerId(0), Slice::new(0, 1024))]);
    }

    #[test]
    fn weighted_sizes() {
        let t = partition(space(3), &[(MinerId(0), 1), (MinerId(1), 1), (MinerId(2), 2)]).unwrap();
        assert_eq!(sizes(&t), vec![2, 2, 4]);
        // 16*10/60 = 2, 16*20/60 = 5, 16*30/60 = 8; one leftover unit to the lowest id
        let t = partition(space(4), &[(MinerId(0), 10), (MinerId(1), 20), (MinerId(2), 30)]).unwrap();
        assert_eq!(sizes(&t), vec![3, 5, 8]);
    }

    #[test]
    fn partition_orders_by_id() {
        let t = partition(space(4), &[(MinerId(7), 1), (MinerId(2), 1)]).unwrap();
        assert_eq!(t.entries(), &[(MinerId(2), Slice::new(0, 8)), (MinerId(7), Slice::new(8, 16))]);
    }

    #[test]
    fn partition_errors() {
        assert_eq!(partition(space(4), &[]), Err(SliceError::NoMiners));
        assert_eq!(partition(space(4), &[(MinerId(1), 0)]), Err(SliceError::ZeroStake(MinerId(1))));
        assert_eq!(
            partition(space(4), &[(MinerId(1), 1), (MinerId(1), 2)]),
            Err(SliceError::DuplicateMiner(MinerId(1)))
        );
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(slice_index_for(2, 0, 3), 2);
        assert_eq!(slice_index_for(2, 1, 3), 0);
        assert_eq!(slice_index_for(1, 3, 3), 1);
    }

    #[test]
    fn penalty_examples() {
        assert!(penalty_set(2, 0, 4).is_empty());
        assert_eq!(penalty_set(2, 1, 4), vec![2]);
        assert_eq!(penalty_set(2, 2, 4), vec![1, 2]);
        assert_eq!(penalty_set(0, 2, 4), vec![0, 3]);
        assert_eq!(penalty_set_with(2, 2, 4, PenaltyRule::Literal), vec![2, 3]);
    }

    #[test]
    fn transfer_examples() {
        let t = SliceTable::equal(space(3), &ids(2)).unwrap();
        assert_eq!(t.transfer_slice(MinerId(0), MinerId(5), Slice::new(0, 0)).unwrap(), t);

        let t2 = t.transfer_slice(MinerId(0), MinerId(5), Slice::new(2, 4)).unwrap();
        assert_eq!(t2.get(MinerId(0)), Some(Slice::new(0, 2)));
        assert_eq!(t2.get(MinerId(5)), Some(Slice::new(2, 4)));
        assert_eq!(t2.len(), 3);

        let whole = t.transfer_slice(MinerId(0), MinerId(5), Slice::new(0, 4)).unwrap();
        assert_eq!(whole.entries(), &[(MinerId(1), Slice::new(4, 8)), (MinerId(5), Slice::new(0, 4))]);

        // existing adjacent buyer absorbs the range
        let grow = t.transfer_slice(MinerId(0), MinerId(1), Slice::new(3, 4)).unwrap();
        assert_eq!(grow.get(MinerId(1)), Some(Slice::new(3, 8)));
    }

    #[test]
    fn transfer_rejections() {
        let t = SliceTable::equal(space(4), &ids(2)).unwrap();
        assert_eq!(
            t.transfer_slice(MinerId(0), MinerId(5), Slice::new(6, 10)),
            Err(SliceError::NotContained { start: 6, end: 10 })
        );
        assert_eq!(t.transfer_slice(MinerId(0), MinerId(5), Slice::new(2, 4)), Err(SliceError::NotAnEnd));
        assert_eq!(
            t.transfer_slice(MinerId(0), MinerId(1), Slice::new(0, 2)),
            Err(SliceError::NotAdjacent(MinerId(1)))
        );
        assert_eq!(
            t.transfer_slice(MinerId(9), MinerId(1), Slice::new(0, 2)),
            Err(SliceError::UnknownMiner(MinerId(9)))
        );
    }

    #[test]
    fn removal_goes_to_lower_neighbor() {
        let t = SliceTable::equal(space(4), &ids(3)).unwrap();
        let r = t.remove(MinerId(1)).unwrap();
        assert_eq!(r.entries(), &[(MinerId(0), Slice::new(0, 11)), (MinerId(2), Slice::new(11, 16))]);
        let r = t.remove(MinerId(0)).unwrap();
        assert_eq!(r.get(MinerId(1)), Some(Slice::new(0, 11)));
        let solo = SliceTable::equal(space(4), &ids(1)).unwrap();
        assert_eq!(solo.remove(MinerId(0)), Err(SliceError::LastMiner));
    }

    #[test]
    fn from_entries_rejects_gaps() {
        let e = vec![(MinerId(0), Slice::new(0, 3)), (MinerId(1), Slice::new(4, 8))];
        assert_eq!(SliceTable::from_entries(space(3), e), Err(SliceError::Broken("gap")));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn covers_exactly(t: &SliceTable) -> bool {
            let mut v: Vec<Slice> = t.entries().iter().map(|e| e.1).collect();
            v.sort_unstable();
            let mut next = 0;
            let mut count = 0;
            for s in v {
                if s.start != next {
                    return false;
                }
                next = s.end;
                count += s.len();
            }
            next == t.space().size() && count == t.space().size()
        }

        proptest! {
            #[test]
            fn partition_law(bits in 1u8..=20, stakes in proptest::collection::vec(1u64..1_000_000, 1..=64)) {
                let list: Vec<_> = stakes.iter().enumerate().map(|(i, &s)| (MinerId(i as u32 * 3), s)).collect();
                let t = partition(space(bits), &list).unwrap();
                prop_assert!(covers_exactly(&t));
                prop_assert!(t.validate().is_ok());
                let equal: Vec<_> = list.iter().map(|&(id, _)| (id, 5)).collect();
                let e = partition(space(bits), &equal).unwrap();
                let s = sizes(&e);
                prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
            }

            #[test]
            fn rotation_is_a_permutation(n in 1usize..40, r in 0u32..100) {
                let mut seen: Vec<usize> = (0..n).map(|i| slice_index_for(i, r, n)).collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            }

            #[test]
            fn penalty_set_matches_replay(n in 1usize..=16, o in 0usize..16, r in 0u32..=16) {
                let o = o % n;
                let mut replay: Vec<usize> = (0..r)
                    .flat_map(|round| (0..n).filter(move |&i| slice_index_for(i, round, n) == o))
                    .collect();
                replay.sort_unstable();
                replay.dedup();
                prop_assert_eq!(penalty_set(o, r, n), replay);
            }

            #[test]
            fn transfer_preserves_partition(
                n in 1u32..10,
                seller in 0u32..10,
                a in 0u64..1024,
                b in 0u64..1024,
                prefix in any::<bool>(),
                buyer_new in any::<bool>(),
            ) {
                let t = SliceTable::equal(space(10), &ids(n)).unwrap();
                let seller = MinerId(seller % n);
                let s = t.get(seller).unwrap();
                let cut = s.start + (a % (s.len() + 1));
                let range = if prefix { Slice::new(s.start, cut) } else { Slice::new(cut, s.end) };
                let buyer = if buyer_new { MinerId(100) } else { MinerId((b as u32) % n) };
                if let Ok(t2) = t.transfer_slice(seller, buyer, range) {
                    prop_assert!(covers_exactly(&t2));
                    prop_assert!(t2.validate().is_ok());
                    if !range.is_empty() && buyer != seller {
                        prop_assert!(t2.get(buyer).unwrap().covers(&range));
                    }
                }
            }
        }
    }
}
