use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridchain::scenario::{load_scenario, report_diff, report_json, ScenarioError};
use gridchain::simnet;

#[derive(Parser)]
#[command(name = "dsg-sim", version, about = "Run smart-grid ledger scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and check a scenario file.
    Validate { scenario: PathBuf },
    /// Run a scenario and write its JSON report.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the NDJSON event log here.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Compare two reports field by field.
    ReportDiff { a: PathBuf, b: PathBuf },
}

fn load(path: &PathBuf) -> Result<gridchain::scenario::ScenarioConfig, ExitCode> {
    load_scenario(path).map_err(|e| {
        match e {
            ScenarioError::Invalid(errs) => {
                eprintln!("{}: invalid scenario", path.display());
                for err in errs.0 {
                    eprintln!("  {err}");
                }
            }
            other => eprintln!("{}: {other}", path.display()),
        }
        ExitCode::from(2)
    })
}

fn read_json(path: &PathBuf) -> Result<serde_json::Value, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(2)
    })?;
    serde_json::from_str(&text).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn write(path: &PathBuf, bytes: &[u8]) -> Result<(), ExitCode> {
    std::fs::write(path, bytes).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) | Err(code) => code,
    }
}

fn real_main() -> Result<ExitCode, ExitCode> {
    match Cli::parse().cmd {
        Cmd::Validate { scenario } => {
            let cfg = load(&scenario)?;
            println!("{}: ok ({} devices, horizon {} ms)", cfg.name, cfg.topology.device_count(), cfg.horizon_ms);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run { scenario, seed, out, events } => {
            let mut cfg = load(&scenario)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let run = simnet::run(&cfg, events.is_some());
            let json = report_json(&run.report);
            match &out {
                Some(p) => write(p, json.as_bytes())?,
                None => print!("{json}"),
            }
            if let (Some(p), Some(log)) = (&events, &run.log) {
                write(p, log)?;
            }
            for v in &run.report.violations {
                eprintln!("violation {} at {} ms: {}", v.invariant, v.at_ms, v.detail);
            }
            Ok(if run.report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::ReportDiff { a, b } => {
            let diffs = report_diff(&read_json(&a)?, &read_json(&b)?);
            for d in &diffs {
                println!("{d}");
            }
            Ok(if diffs.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}
