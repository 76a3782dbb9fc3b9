use poc_core::accounts::distribute_rewards;
use poc_core::slicing::partition;
use poc_core::{simulate, MinerId, NonceSpace, SimConfig, SystemConfig, Transaction};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn partition_covers_space(bits in 4u8..=20, stakes in prop::collection::vec(1u64..1_000, 1..16)) {
        let space = NonceSpace::new(bits).unwrap();
        prop_assume!(stakes.len() as u64 <= space.size());
        let s: Vec<_> = stakes.iter().enumerate().map(|(i, &v)| (MinerId(i as u32), v)).collect();
        let t = partition(space, &s).unwrap();
        let mut next = 0;
        for (_, sl) in t.entries() {
            prop_assert_eq!(sl.start, next);
            next = sl.end;
        }
        prop_assert_eq!(next, space.size());
    }

    #[test]
    fn rewards_are_conserved(stakes in prop::collection::vec(1u64..500, 1..10), reward in 0u64..100_000) {
        use poc_core::accounts::{init_genesis, GenesisParams};
        use poc_core::message::KeyRing;
        use poc_core::{AccountParams, PowMode};
        let params = AccountParams { unit_stake: 1, min_stake_multiple: 1, ..Default::default() };
        let s: Vec<_> = stakes.iter().enumerate().map(|(i, &v)| (MinerId(i as u32), v)).collect();
        let g = GenesisParams {
            version: 1,
            space: NonceSpace::new(16).unwrap(),
            pow_mode: PowMode::Modeled,
            difficulty: 4,
            sigma: 1,
            n_replicas: 4,
            f_miners: 0,
        };
        let (_, mut db, t) = init_genesis(&s, &KeyRing::new(1), params, g).unwrap();
        let before: u64 = s.iter().map(|(id, _)| db.get(*id).unwrap().mining.0).sum();
        distribute_rewards(&mut db, &t, reward).unwrap();
        let after: u64 = s.iter().map(|(id, _)| db.get(*id).unwrap().mining.0).sum();
        prop_assert_eq!(after - before, reward);
    }

    #[test]
    fn transaction_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        if let Ok(t) = Transaction::decode(&bytes) {
            prop_assert_eq!(t.encode(), bytes);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synchronous_runs_are_clean(seed in any::<u64>(), n in prop::sample::select(vec![3u32, 4, 5]), sigma in 1u32..=2) {
        let cfg = SimConfig {
            system: SystemConfig {
                n_miners: n,
                f_miners: (n - 1) / 2,
                sigma,
                nonce_bits: 12,
                difficulty: 7,
                commit_interval: 500,
                ..Default::default()
            },
            blocks: 3,
            seed,
            ..Default::default()
        };
        let m = simulate(cfg).unwrap();
        prop_assert!(m.completed && m.is_clean(), "{:?}", m.violations);
        prop_assert!(m.penalties.iter().all(|p| p.honest_named.is_empty()));
    }
}
