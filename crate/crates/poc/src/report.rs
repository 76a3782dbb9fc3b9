//! JSON renderings of run metrics, traces and audit results.

use std::collections::BTreeMap;

use poc_core::chain::{AuditFailure, AuditSummary};
use poc_core::fork::{ForkParams, ForkReport};
use poc_core::message::NodeId;
use poc_core::netsim::TraceRecord;
use poc_core::MetricsReport;
use serde::Serialize;

/// Bumped whenever a field changes meaning or disappears.
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Latency {
    pub count: u64,
    pub min: u64,
    pub median: u64,
    pub p90: u64,
    pub max: u64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Penalty {
    pub mined_seq: u64,
    pub round: u32,
    pub culprits: Vec<u32>,
    pub honest_named: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: String,
    pub completed: bool,
    pub end_time: u64,
    pub committed_sblocks: u64,
    pub settled_blocks: u64,
    pub sigma: u32,
    pub settled_per_mtick: f64,
    pub latency: Latency,
    pub shift_histogram: BTreeMap<String, u64>,
    pub merges: u64,
    pub penalties: Vec<Penalty>,
    pub total_attempts: u64,
    pub rewards: BTreeMap<String, u64>,
    pub equivocations: u64,
    pub invalid_nonces: u64,
    pub auth_failures: u64,
    pub messages: u64,
    pub violations: Vec<String>,
    pub trace_hash: String,
    pub trace_events: u64,
    /// Informational only; everything else is simulated time.
    pub wall_clock_ms: u64,
}

impl RunReport {
    pub fn new(m: &MetricsReport, mode: &str, sigma: u32, wall_clock_ms: u64) -> Self {
        let l = m.latency;
        Self {
            schema_version: REPORT_SCHEMA,
            seed: m.seed,
            mode: mode.into(),
            completed: m.completed,
            end_time: m.end_time,
            committed_sblocks: m.committed_sblocks,
            settled_blocks: m.settled_blocks,
            sigma,
            settled_per_mtick: m.settled_per_mtick,
            latency: Latency { count: l.count, min: l.min, median: l.median, p90: l.p90, max: l.max, mean: l.mean },
            shift_histogram: m.shift_histogram.iter().map(|(r, c)| (r.to_string(), *c)).collect(),
            merges: m.merges,
            penalties: m
                .penalties
                .iter()
                .map(|p| Penalty {
                    mined_seq: p.seq,
                    round: p.round,
                    culprits: p.culprits.iter().map(|c| c.0).collect(),
                    honest_named: p.honest_named.iter().map(|c| c.0).collect(),
                })
                .collect(),
            total_attempts: m.total_attempts,
            rewards: m.rewards.iter().map(|(id, r)| (id.0.to_string(), *r)).collect(),
            equivocations: m.equivocations,
            invalid_nonces: m.invalid_nonces,
            auth_failures: m.auth_failures,
            messages: m.messages,
            violations: m.violations.iter().map(ToString::to_string).collect(),
            trace_hash: m.trace_hash.to_string(),
            trace_events: m.trace_events,
            wall_clock_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForkSample {
    pub time: f64,
    pub fork_len: u64,
    pub honest_len: u64,
}

/// Outcome of a long-range fork scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForkRunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub m: u64,
    pub h: u64,
    pub fork_start: u64,
    pub target: u64,
    pub honest_time: f64,
    pub honest_work: u64,
    pub adversary_time: f64,
    pub adversary_work: u64,
    pub ratio: f64,
    pub model_ratio: f64,
    pub honest_len_at_finish: u64,
    pub merges: u64,
    pub forged_signatures: u64,
    pub samples: Vec<ForkSample>,
}

impl ForkRunReport {
    pub fn new(p: &ForkParams, r: &ForkReport) -> Self {
        Self {
            schema_version: REPORT_SCHEMA,
            seed: p.seed,
            m: p.m,
            h: p.h,
            fork_start: p.fork_start,
            target: p.target,
            honest_time: r.honest_time,
            honest_work: r.honest_work,
            adversary_time: r.adversary_time,
            adversary_work: r.adversary_work,
            ratio: r.ratio,
            model_ratio: r.model_ratio,
            honest_len_at_finish: r.honest_len_at_finish,
            merges: r.merges,
            forged_signatures: r.forged_signatures,
            samples: r
                .samples
                .iter()
                .map(|s| ForkSample { time: s.time, fork_len: s.fork_len, honest_len: s.honest_len })
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    time: u64,
    node: String,
    kind: &'a str,
    seq: u64,
    round: u32,
}

fn node_name(n: NodeId) -> String {
    match n {
        NodeId::Miner(m) => format!("miner-{}", m.0),
        NodeId::Replica(r) => format!("replica-{}", r.0),
        NodeId::Sequencer => "sequencer".into(),
    }
}

/// One JSON object per line.
pub fn trace_lines(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        let l = TraceLine { time: r.time, node: node_name(r.node), kind: r.kind, seq: r.seq, round: r.round };
        out.push_str(&serde_json::to_string(&l).unwrap());
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub ok: bool,
    pub blocks: Option<u64>,
    pub sblocks: Option<u64>,
    pub transactions: Option<u64>,
    pub failed_block: Option<u64>,
    pub error: Option<String>,
}

impl VerifyReport {
    pub fn from_audit(r: &Result<AuditSummary, AuditFailure>) -> Self {
        match r {
            Ok(s) => Self {
                schema_version: REPORT_SCHEMA,
                ok: true,
                blocks: Some(s.blocks),
                sblocks: Some(s.sblocks),
                transactions: Some(s.transactions),
                failed_block: None,
                error: None,
            },
            Err(f) => Self {
                schema_version: REPORT_SCHEMA,
                ok: false,
                blocks: None,
                sblocks: None,
                transactions: None,
                failed_block: Some(f.block),
                error: Some(f.to_string()),
            },
        }
    }

    pub fn parse_error(msg: String) -> Self {
        Self {
            schema_version: REPORT_SCHEMA,
            ok: false,
            blocks: None,
            sblocks: None,
            transactions: None,
            failed_block: None,
            error: Some(msg),
        }
    }
}
