//! Runs a scenario file (or the built-in default week) and prints a summary.
//!
//!     cargo run --example run_scenario -- crates/core/scenarios/default.toml

use std::time::Instant;

use gridchain::scenario::{load_scenario, ScenarioConfig};
use gridchain::simnet;

fn main() {
    let cfg = match std::env::args().nth(1) {
        Some(path) => load_scenario(&path).unwrap_or_else(|e| {
            eprintln!("{path}: {e}");
            std::process::exit(2);
        }),
        None => ScenarioConfig::default(),
    };
    let started = Instant::now();
    let out = simnet::run(&cfg, false);
    let r = &out.report;
    println!("scenario {} seed {} ({} events in {:.2?})", r.scenario, r.seed, r.event_log.events, started.elapsed());
    println!("{:<18} {:>9} {:>9} {:>8} {:>8} {:>10}", "class", "generated", "forwarded", "dropped", "rejected", "mean ms");
    for (name, c) in &r.classes {
        println!(
            "{name:<18} {:>9} {:>9} {:>8} {:>8} {:>10.1}",
            c.generated, c.forwarded, c.dropped, c.rejected, c.latency.mean_ms
        );
    }
    println!("alarms: {}", r.alarms.len());
    for d in &r.detections {
        println!("attack {} {}: detected={} via {:?} after {:?} ms", d.attack_id, d.kind, d.detected, d.mechanism, d.detect_latency_ms);
    }
    if let Some(l) = &r.linking {
        println!("linking: {} pairs linked ({})", l.pairs_linked, l.method);
    }
    println!("violations: {}", r.violations.len());
    for v in r.violations.iter().take(10) {
        println!("  {} at {} ms: {}", v.invariant, v.at_ms, v.detail);
    }
    println!("digest {}", r.event_log.digest);
}
