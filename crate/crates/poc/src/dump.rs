//! Chain dumps as JSON lines.
//!
//! ```text
//! {"kind":"genesis",...}          protocol constants and miner keys
//! {"kind":"slice","miner":0,...}  one line per genesis slice
//! {"kind":"block",...}            one line per settled block
//! {"kind":"sblock",...}           committed S-blocks past the tip
//! ```
//!
//! Headers and transactions are hex of their binary encodings. Reading is
//! strict: each line must re-serialize to exactly the bytes it was read from.

use std::fmt::Write as _;

use poc_core::accounts::GenesisMiner;
use poc_core::chain::{RewardTx, Settlement};
use poc_core::{
    BlockHeader, GenesisRecord, Hash256, MinedBlock, MinedChain, MinerId, PowMode, ReplicaId, SBlock, Slice,
    Transaction,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DUMP_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct DumpError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Line {
    Genesis(GenesisLine),
    Slice(SliceLine),
    Block(BlockLine),
    Sblock(SBlockLine),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenesisLine {
    schema: u32,
    version: u32,
    nonce_bits: u8,
    pow_mode: String,
    difficulty: u32,
    sigma: u32,
    n_replicas: u32,
    f_miners: u32,
    block_reward: u64,
    miners: Vec<MinerLine>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MinerLine {
    id: u32,
    staking_key: String,
    mining_key: String,
    stake: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SliceLine {
    miner: u32,
    start: u64,
    end: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockLine {
    header: String,
    sblocks: Vec<SBlockLine>,
    rewards: Vec<(u32, u64)>,
    settlement: Option<(u64, u64)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SBlockLine {
    seq: u64,
    proposer: u32,
    merkle_root: String,
    txns: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

fn unhex(s: &str) -> Result<Vec<u8>, String> {
    if s.len() % 2 != 0 {
        return Err("odd-length hex".into());
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            s.get(i..i + 2)
                .filter(|p| p.bytes().all(|c| matches!(c, b'0'..=b'9' | b'a'..=b'f')))
                .and_then(|p| u8::from_str_radix(p, 16).ok())
                .ok_or_else(|| format!("bad hex at offset {i}"))
        })
        .collect()
}

fn hash(s: &str) -> Result<Hash256, String> {
    Hash256::from_hex(s).ok_or_else(|| format!("`{s}` is not a 32-byte hash"))
}

fn sblock_line(s: &SBlock) -> SBlockLine {
    SBlockLine {
        seq: s.seq,
        proposer: s.proposer.0,
        merkle_root: s.merkle_root.to_string(),
        txns: s.txns.iter().map(|t| hex(&t.encode())).collect(),
    }
}

fn sblock_from(l: SBlockLine) -> Result<SBlock, String> {
    let txns = l
        .txns
        .iter()
        .enumerate()
        .map(|(i, t)| Transaction::decode(&unhex(t)?).map_err(|e| format!("transaction {i}: {e}")))
        .collect::<Result<_, _>>()?;
    Ok(SBlock { seq: l.seq, merkle_root: hash(&l.merkle_root)?, txns, proposer: ReplicaId(l.proposer) })
}

fn render(l: &Line) -> String {
    serde_json::to_string(l).expect("dump lines serialize")
}

/// Writes `chain` as JSON lines.
pub fn write_dump(chain: &MinedChain) -> String {
    let g = &chain.genesis;
    let mut out = String::new();
    let mut push = |l: Line| {
        out.push_str(&render(&l));
        out.push('\n');
    };
    push(Line::Genesis(GenesisLine {
        schema: DUMP_SCHEMA,
        version: g.version,
        nonce_bits: g.nonce_bits,
        pow_mode: g.pow_mode.as_str().into(),
        difficulty: g.difficulty,
        sigma: g.sigma,
        n_replicas: g.n_replicas,
        f_miners: g.f_miners,
        block_reward: g.block_reward,
        miners: g
            .miners
            .iter()
            .map(|m| MinerLine {
                id: m.id.0,
                staking_key: m.staking_key.to_string(),
                mining_key: m.mining_key.to_string(),
                stake: m.stake,
            })
            .collect(),
    }));
    for m in &g.miners {
        push(Line::Slice(SliceLine { miner: m.id.0, start: m.slice.start, end: m.slice.end }));
    }
    for b in &chain.blocks {
        push(Line::Block(BlockLine {
            header: hex(&b.header.to_bytes()),
            sblocks: b.sblocks.iter().map(sblock_line).collect(),
            rewards: b.reward_txns.iter().map(|r| (r.miner.0, r.amount)).collect(),
            settlement: b.settlement.map(|s| (s.nonce, s.attest_seq)),
        }));
    }
    for s in &chain.tail {
        push(Line::Sblock(sblock_line(s)));
    }
    out
}

/// Parses a dump written by [`write_dump`].
pub fn read_dump(text: &str) -> Result<MinedChain, DumpError> {
    let err = |line: usize, msg: String| DumpError { line, msg };
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(err(text.lines().count(), "missing final newline (truncated?)".into()));
    }
    let mut genesis: Option<GenesisRecord> = None;
    let mut slices = 0usize;
    let mut blocks: Vec<MinedBlock> = Vec::new();
    let mut tail: Vec<SBlock> = Vec::new();
    for (i, raw) in text.split_terminator('\n').enumerate() {
        let n = i + 1;
        let line: Line = serde_json::from_str(raw).map_err(|e| err(n, e.to_string()))?;
        if render(&line) != raw {
            return Err(err(n, "line is not in canonical form".into()));
        }
        match line {
            Line::Genesis(g) => {
                if n != 1 {
                    return Err(err(n, "genesis must be the first line".into()));
                }
                if g.schema != DUMP_SCHEMA {
                    return Err(err(n, format!("unsupported schema {}", g.schema)));
                }
                let pow_mode = PowMode::parse(&g.pow_mode)
                    .filter(|m| m.as_str() == g.pow_mode)
                    .ok_or_else(|| err(n, "bad pow_mode".into()))?;
                let miners = g
                    .miners
                    .iter()
                    .map(|m| {
                        Ok(GenesisMiner {
                            id: MinerId(m.id),
                            staking_key: hash(&m.staking_key)?,
                            mining_key: hash(&m.mining_key)?,
                            stake: m.stake,
                            slice: Slice::new(0, 0),
                        })
                    })
                    .collect::<Result<_, String>>()
                    .map_err(|m| err(n, m))?;
                genesis = Some(GenesisRecord {
                    version: g.version,
                    nonce_bits: g.nonce_bits,
                    pow_mode,
                    difficulty: g.difficulty,
                    sigma: g.sigma,
                    n_replicas: g.n_replicas,
                    f_miners: g.f_miners,
                    block_reward: g.block_reward,
                    miners,
                });
            }
            Line::Slice(s) => {
                let g = genesis.as_mut().ok_or_else(|| err(n, "slice before genesis".into()))?;
                if !blocks.is_empty() || !tail.is_empty() {
                    return Err(err(n, "slice after blocks".into()));
                }
                let m = g.miners.get_mut(slices).ok_or_else(|| err(n, "more slices than miners".into()))?;
                if m.id.0 != s.miner {
                    return Err(err(n, format!("slice for miner {} where {} was expected", s.miner, m.id.0)));
                }
                if s.start > s.end {
                    return Err(err(n, "slice start exceeds end".into()));
                }
                m.slice = Slice::new(s.start, s.end);
                slices += 1;
            }
            Line::Block(b) => {
                let g = genesis.as_ref().ok_or_else(|| err(n, "block before genesis".into()))?;
                if slices != g.miners.len() {
                    return Err(err(n, "missing slice lines".into()));
                }
                if !tail.is_empty() {
                    return Err(err(n, "block after tail S-blocks".into()));
                }
                let bytes = unhex(&b.header).map_err(|m| err(n, m))?;
                let header = BlockHeader::from_bytes(&bytes).ok_or_else(|| err(n, "header is not 92 bytes".into()))?;
                let sblocks =
                    b.sblocks.into_iter().map(sblock_from).collect::<Result<_, _>>().map_err(|m| err(n, m))?;
                blocks.push(MinedBlock {
                    header,
                    sblocks,
                    reward_txns: b.rewards.iter().map(|&(m, amount)| RewardTx { miner: MinerId(m), amount }).collect(),
                    settlement: b.settlement.map(|(nonce, attest_seq)| Settlement { nonce, attest_seq }),
                });
            }
            Line::Sblock(s) => {
                let g = genesis.as_ref().ok_or_else(|| err(n, "S-block before genesis".into()))?;
                if slices != g.miners.len() {
                    return Err(err(n, "missing slice lines".into()));
                }
                tail.push(sblock_from(s).map_err(|m| err(n, m))?);
            }
        }
    }
    let genesis = genesis.ok_or_else(|| err(0, "empty dump".into()))?;
    if slices != genesis.miners.len() {
        return Err(err(text.lines().count(), "missing slice lines".into()));
    }
    Ok(MinedChain { genesis, blocks, tail })
}
