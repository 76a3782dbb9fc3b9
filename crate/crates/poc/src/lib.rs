//! Scenario files, chain dumps and reports around `poc-core`.

pub mod config;
pub mod dump;
pub mod report;

use poc_core::chain::verify_chain;
use poc_core::netsim::{SimError, TraceRecord};
use poc_core::{MetricsReport, MinedChain, Simulation};

use crate::config::ScenarioConfig;
use crate::report::VerifyReport;

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Failure = 1,
    Config = 2,
}

pub struct RunOutput {
    pub metrics: MetricsReport,
    /// An honest miner's settled chain, trimmed for auditing.
    pub chain: Option<MinedChain>,
    pub trace: Vec<TraceRecord>,
}

impl RunOutput {
    pub fn exit(&self) -> Exit {
        if self.metrics.is_clean() {
            Exit::Success
        } else {
            Exit::Failure
        }
    }
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(cfg.sim.clone())?;
    let metrics = sim.run();
    let chain = sim.reference_miner().map(|m| m.ledger().chain().trimmed());
    Ok(RunOutput { metrics, chain, trace: sim.trace().to_vec() })
}

/// Parses and audits a dump.
pub fn verify_dump(text: &str) -> (VerifyReport, Exit) {
    match dump::read_dump(text) {
        Err(e) => (VerifyReport::parse_error(e.to_string()), Exit::Failure),
        Ok(chain) => {
            let r = verify_chain(&chain);
            let exit = if r.is_ok() { Exit::Success } else { Exit::Failure };
            (VerifyReport::from_audit(&r), exit)
        }
    }
}
