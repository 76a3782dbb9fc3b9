//! Flat `key = value` scenario files.
//!
//! One setting per line, `#` starts a comment. Keys are listed in the README.
//! Per-node keys carry the node id after a dot (`miner.2 = withholder`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use poc_core::fork::ForkParams;
use poc_core::message::NodeId;
use poc_core::miner::MinerBehavior;
use poc_core::netsim::{Reconfiguration, SimError};
use poc_core::slicing::PenaltyRule;
use poc_core::{MinerId, NonceSpace, PowMode, ReplicaBehavior, ReplicaId, SimConfig, Slice};
use thiserror::Error;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "POC_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: `{key}` is set twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: unknown key `{key}`")]
    Unknown { line: usize, key: String },
    #[error("line {line}: `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("{SEED_ENV}: `{0}` is not an unsigned integer")]
    SeedEnv(String),
    #[error("invalid scenario: {0}")]
    Invalid(#[from] SimError),
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            let (k, v) = s.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if map.insert(k.to_string(), (line, v.to_string())).is_some() {
                return Err(ConfigError::Duplicate { line, key: k.to_string() });
            }
        }
        Ok(Self { map })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str, into: &mut T) -> Result<(), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.take(key) {
            *into = v.parse().map_err(|e: T::Err| bad(line, key, e.to_string()))?;
        }
        Ok(())
    }

    /// Removes every `prefix.<suffix>` key, in key order.
    fn with_prefix(&mut self, prefix: &str) -> Vec<(usize, String, String, String)> {
        let p = format!("{prefix}.");
        let keys: Vec<String> = self.map.keys().filter(|k| k.starts_with(&p)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let (line, v) = self.map.remove(&k).unwrap();
                (line, k[p.len()..].to_string(), k, v)
            })
            .collect()
    }
}

fn bad(line: usize, key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Value { line, key: key.to_string(), msg: msg.into() }
}

fn num<T: FromStr>(line: usize, key: &str, s: &str) -> Result<T, ConfigError> {
    s.trim().parse().map_err(|_| bad(line, key, format!("`{}` is not a number", s.trim())))
}

fn list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect()
}

fn opt_miner(line: usize, key: &str, s: &str) -> Result<Option<MinerId>, ConfigError> {
    match s.trim() {
        "-" | "none" => Ok(None),
        v => Ok(Some(MinerId(num(line, key, v)?))),
    }
}

/// A parsed and validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub sim: SimConfig,
    /// First replaced block when `hashpower` turns the run into a fork attack.
    pub fork_start: u64,
}

impl ScenarioConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut e = Entries::parse(text)?;
        let mut c = SimConfig::default();
        let sys = &mut c.system;
        e.get("n_replicas", &mut sys.n_replicas)?;
        e.get("f_replicas", &mut sys.f_replicas)?;
        e.get("n_miners", &mut sys.n_miners)?;
        e.get("f_miners", &mut sys.f_miners)?;
        e.get("sigma", &mut sys.sigma)?;
        e.get("commit_interval", &mut sys.commit_interval)?;
        e.get("txns_per_block", &mut sys.txns_per_block)?;
        e.get("difficulty", &mut sys.difficulty)?;
        e.get("nonce_bits", &mut sys.nonce_bits)?;
        if let Some((line, v)) = e.take("timer_delta") {
            sys.delta = Some(num(line, "timer_delta", &v)?);
        }

        if let Some((line, v)) = e.take("mode") {
            c.mode = PowMode::parse(&v).ok_or_else(|| bad(line, "mode", "expected sha256 or modeled"))?;
        }
        e.get("version", &mut c.version)?;
        e.get("seed", &mut c.seed)?;
        e.get("blocks", &mut c.blocks)?;
        e.get("max_time", &mut c.max_time)?;
        e.get("expect_completion", &mut c.expect_completion)?;
        e.get("trace", &mut c.keep_trace)?;
        e.get("attempt_cost", &mut c.attempt_cost)?;
        e.get("chunk", &mut c.chunk)?;
        if let Some((line, v)) = e.take("stakes") {
            c.stakes = list(&v).into_iter().map(|s| num(line, "stakes", s)).collect::<Result<_, _>>()?;
        }
        e.get("min_stake_multiple", &mut c.accounts.min_stake_multiple)?;
        e.get("unit_stake", &mut c.accounts.unit_stake)?;
        e.get("block_reward", &mut c.accounts.block_reward)?;
        e.get("penalty", &mut c.accounts.penalty)?;
        if let Some((line, v)) = e.take("penalty_rule") {
            c.penalty_rule = match v.as_str() {
                "holders" => PenaltyRule::Holders,
                "literal" => PenaltyRule::Literal,
                _ => return Err(bad(line, "penalty_rule", "expected holders or literal")),
            };
        }

        let d = &mut c.delay;
        e.get("gst", &mut d.gst)?;
        e.get("max_delay", &mut d.delta)?;
        e.get("min_delay", &mut d.min_delay)?;
        d.pre_gst_max = d.delta;
        e.get("pre_gst_max", &mut d.pre_gst_max)?;
        e.get("drop_prob", &mut d.drop_prob)?;
        e.get("dup_prob", &mut d.dup_prob)?;
        e.get("retry_budget", &mut d.retry_budget)?;
        d.retry_after = d.delta.max(1);
        e.get("retry_after", &mut d.retry_after)?;

        let a = &mut c.adversary;
        e.get("activate_at", &mut a.activate_at)?;
        for (line, id, key, v) in e.with_prefix("miner") {
            let b = MinerBehavior::parse(&v).ok_or_else(|| bad(line, &key, "unknown miner behavior"))?;
            a.miners.insert(MinerId(num(line, &key, &id)?), b);
        }
        for (line, id, key, v) in e.with_prefix("replica") {
            let b = ReplicaBehavior::parse(&v).ok_or_else(|| bad(line, &key, "unknown replica behavior"))?;
            a.replicas.insert(ReplicaId(num(line, &key, &id)?), b);
        }
        if let Some((line, v)) = e.take("compromised") {
            a.compromised = list(&v)
                .into_iter()
                .map(|s| num(line, "compromised", s).map(|i| NodeId::Miner(MinerId(i))))
                .collect::<Result<_, _>>()?;
        }
        if let Some((line, v)) = e.take("hashpower") {
            let (m, h) = v.split_once(':').ok_or_else(|| bad(line, "hashpower", "expected m:h"))?;
            a.hashpower = Some((num(line, "hashpower", m)?, num(line, "hashpower", h)?));
        }

        for (line, id, key, v) in e.with_prefix("join") {
            let f = list(&v);
            if f.len() != 5 {
                return Err(bad(line, &key, "expected at,stake,seller,start,end"));
            }
            let miner = MinerId(num(line, &key, &id)?);
            let r = Reconfiguration::Join {
                miner,
                stake: num(line, &key, f[1])?,
                seller: opt_miner(line, &key, f[2])?,
                range: Slice::new(num(line, &key, f[3])?, num(line, &key, f[4])?),
            };
            c.reconfig.push((num(line, &key, f[0])?, r));
        }
        for (line, id, key, v) in e.with_prefix("leave") {
            let f = list(&v);
            if f.is_empty() || f.len() > 2 {
                return Err(bad(line, &key, "expected at[,buyer]"));
            }
            let buyer = match f.get(1) {
                Some(b) => opt_miner(line, &key, b)?,
                None => None,
            };
            let miner = MinerId(num(line, &key, &id)?);
            c.reconfig.push((num(line, &key, f[0])?, Reconfiguration::Leave { miner, buyer }));
        }
        for (line, _, key, v) in e.with_prefix("set_difficulty") {
            let f = list(&v);
            if f.len() != 2 {
                return Err(bad(line, &key, "expected at,difficulty"));
            }
            c.reconfig.push((num(line, &key, f[0])?, Reconfiguration::SetDifficulty(num(line, &key, f[1])?)));
        }
        c.reconfig.sort_by_key(|r| r.0);
        let mut fork_start = 1;
        e.get("fork_start", &mut fork_start)?;

        if let Some((key, (line, _))) = e.map.into_iter().next() {
            return Err(ConfigError::Unknown { line, key });
        }
        let s = Self { sim: c, fork_start };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim.validate()?;
        NonceSpace::new(self.sim.system.nonce_bits).map_err(|_| SimError::Other("bad nonce width"))?;
        Ok(())
    }

    /// Applies `--seed`, falling back to [`SEED_ENV`].
    pub fn override_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<(), ConfigError> {
        if let Some(s) = flag {
            self.sim.seed = s;
        } else if let Some(v) = env {
            self.sim.seed = v.trim().parse().map_err(|_| ConfigError::SeedEnv(v.to_string()))?;
        }
        Ok(())
    }

    pub fn override_mode(&mut self, mode: Option<PowMode>) -> Result<(), ConfigError> {
        if let Some(m) = mode {
            self.sim.mode = m;
            self.validate()?;
        }
        Ok(())
    }

    /// Fork-attack parameters, present when `hashpower` is set.
    pub fn fork_params(&self) -> Option<ForkParams> {
        let (m, h) = self.sim.adversary.hashpower?;
        let s = &self.sim;
        Some(ForkParams {
            m,
            h,
            n_miners: s.system.n_miners,
            fork_start: self.fork_start,
            target: s.blocks,
            nonce_bits: s.system.nonce_bits,
            difficulty: s.system.difficulty,
            mode: s.mode,
            compromised: s.adversary.compromised.clone(),
            seed: s.seed,
        })
    }
}
