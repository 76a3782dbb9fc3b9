//! Collaborative proof-of-work mining.
//!
//! Miners split the nonce space of a single block into disjoint slices and search
//! them in parallel instead of racing each other. A valid nonce is attested by an
//! underlying BFT system (modelled here as a committed-block sequencer), so the
//! mined chain inherits finality from that system while the proof of work defends
//! against long-range rewrites with stolen keys.
//!
//! The crate is `no_std` (with `alloc`) and contains no IO. Everything runs inside a
//! seeded discrete-event simulation, so identical inputs yield identical traces.
//!
//! Module map:
//! - [`puzzle`]: header encoding, difficulty check, slice search
//! - [`slicing`]: stake-weighted slice tables, rotation and penalty sets
//! - [`chain`]: S-blocks, mined blocks, merge, append and audit
//! - [`accounts`]: genesis, staking/mining accounts, rewards and penalties
//! - [`message`]: signed protocol messages, certificates and the simulated key ring
//! - [`ledger`]: replicated state folded over committed S-blocks
//! - [`miner`]: the miner state machine
//! - [`system_s`]: the simulated consensus system (replicas + sequencer)
//! - [`netsim`]: scheduler, delay model, adversary specification and the simulation driver
//! - [`fork`]: long-range fork attack experiments
//! - [`analysis`]: closed-form attack and energy models

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod accounts;
pub mod analysis;
pub mod chain;
mod codec;
pub mod fork;
pub mod ledger;
pub mod message;
pub mod miner;
pub mod netsim;
pub mod puzzle;
pub mod slicing;
pub mod system_s;

pub use accounts::{Account, AccountDb, AccountParams, GenesisRecord, TokenAmount};
pub use chain::{MinedBlock, MinedChain, SBlock, Transaction};
pub use ledger::{Ledger, LedgerEvent};
pub use miner::{Miner, MinerBehavior};
pub use netsim::{simulate, AdversarySpec, DelayModel, MetricsReport, SimConfig, Simulation};
pub use puzzle::{BlockHeader, Hash256, NonceSpace, PowMode, Puzzle, SearchBudget};
pub use slicing::{MinerId, Slice, SliceTable};
pub use system_s::{ReplicaBehavior, ReplicaId, SystemConfig};

/// Simulated time in abstract ticks.
pub type SimTime = u64;
