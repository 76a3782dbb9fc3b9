use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use poc::config::{ScenarioConfig, SEED_ENV};
use poc::report::{trace_lines, ForkRunReport, RunReport};
use poc::{dump, Exit};
use poc_core::analysis::{energy_model, fork_success_prob_with_base, rebuild_time};
use poc_core::fork::run_fork_attack;
use poc_core::PowMode;
use serde_json::json;

#[derive(Parser)]
#[command(name = "poc", version, about = "Collaborative proof-of-work mining simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and report metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config and POC_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics JSON path; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the settled chain as JSON lines.
        #[arg(long)]
        dump_chain: Option<PathBuf>,
        /// sha256 (real hashing) or modeled.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<PowMode>,
        /// Write trace records as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Audit a chain dump.
    Verify { dump: PathBuf },
    /// Closed-form attack and energy models.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
}

#[derive(Subcommand)]
enum Analysis {
    /// Chance of b consecutive replacement blocks.
    ForkProb {
        #[arg(long)]
        b: u32,
        /// Adversary per-block chance; 0.5 unless overridden.
        #[arg(long, default_value_t = 0.5)]
        base: f64,
    },
    /// Months to rebuild an alpha-month chain.
    RebuildTime {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        m: f64,
        #[arg(long)]
        h: f64,
    },
    /// Competitive versus collaborative cost.
    Energy {
        #[arg(long)]
        n: u32,
        #[arg(long)]
        e: f64,
        #[arg(long)]
        tau: f64,
    },
}

fn parse_mode(s: &str) -> Result<PowMode, String> {
    PowMode::parse(s).ok_or_else(|| format!("unknown mode `{s}`"))
}

fn write(path: &Path, body: &str) -> Result<(), Exit> {
    std::fs::write(path, body).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        Exit::Failure
    })
}

fn config_error(e: impl std::fmt::Display) -> Exit {
    eprintln!("config error: {e}");
    Exit::Config
}

fn run(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    dump_chain: Option<&Path>,
    mode: Option<PowMode>,
    trace: Option<&Path>,
) -> Result<Exit, Exit> {
    let mut cfg = ScenarioConfig::from_file(config).map_err(config_error)?;
    cfg.override_seed(seed, std::env::var(SEED_ENV).ok().as_deref()).map_err(config_error)?;
    cfg.override_mode(mode).map_err(config_error)?;
    if let Some(p) = cfg.fork_params() {
        if dump_chain.is_some() || trace.is_some() {
            return Err(config_error("fork scenarios produce no chain dump or trace"));
        }
        let r = run_fork_attack(&p).map_err(config_error)?;
        let body = serde_json::to_string_pretty(&ForkRunReport::new(&p, &r)).unwrap() + "\n";
        match out {
            Some(o) => write(o, &body)?,
            None => print!("{body}"),
        }
        return Ok(Exit::Success);
    }
    if trace.is_some() {
        cfg.sim.keep_trace = true;
    }
    let started = Instant::now();
    let res = poc::run(&cfg).map_err(config_error)?;
    let ms = started.elapsed().as_millis() as u64;
    let report = RunReport::new(&res.metrics, cfg.sim.mode.as_str(), cfg.sim.system.sigma, ms);
    let body = serde_json::to_string_pretty(&report).unwrap() + "\n";
    match out {
        Some(p) => write(p, &body)?,
        None => print!("{body}"),
    }
    if let Some(p) = dump_chain {
        let chain = res.chain.as_ref().ok_or_else(|| {
            eprintln!("error: no honest miner to take the chain from");
            Exit::Failure
        })?;
        write(p, &dump::write_dump(chain))?;
    }
    if let Some(p) = trace {
        write(p, &trace_lines(&res.trace))?;
    }
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    Ok(res.exit())
}

fn verify(path: &Path) -> Exit {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return Exit::Failure;
        }
    };
    let (report, exit) = poc::verify_dump(&text);
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    if let Some(e) = &report.error {
        eprintln!("verification failed: {e}");
    }
    exit
}

fn analyze(what: Analysis) -> Exit {
    let out = match what {
        Analysis::ForkProb { b, base } => {
            if !(0.0..=1.0).contains(&base) {
                return config_error("base must lie in [0, 1]");
            }
            json!({ "b": b, "base": base, "probability": fork_success_prob_with_base(b, base) })
        }
        Analysis::RebuildTime { alpha, m, h } => match rebuild_time(alpha, m, h) {
            Ok(t) => json!({ "alpha": alpha, "m": m, "h": h, "months": t }),
            Err(e) => return config_error(e),
        },
        Analysis::Energy { n, e, tau } => match energy_model(n, e, tau) {
            Ok(r) => json!({
                "n": n, "e": e, "tau": tau,
                "pow": { "resources": r.pow.resources, "time": r.pow.time, "energy": r.pow.energy },
                "poc": { "resources": r.poc.resources, "time": r.poc.time, "energy": r.poc.energy },
            }),
            Err(e) => return config_error(e),
        },
    };
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    Exit::Success
}

fn main() -> ExitCode {
    let exit = match Cli::parse().cmd {
        Cmd::Run { config, seed, out, dump_chain, mode, trace } => {
            run(&config, seed, out.as_deref(), dump_chain.as_deref(), mode, trace.as_deref()).unwrap_or_else(|e| e)
        }
        Cmd::Verify { dump } => verify(&dump),
        Cmd::Analyze { what } => analyze(what),
    };
    ExitCode::from(exit as u8)
}
