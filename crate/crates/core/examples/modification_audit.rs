//! Modification attacks: a storage-side edit caught on the next store, and
//! a consistent edit of both copies caught by the NGW broadcast audit.

use gridchain::scenario::load_scenario;
use gridchain::simnet;

fn main() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios");
    for name in ["modification", "broadcast_audit"] {
        let cfg = load_scenario(format!("{dir}/{name}.toml")).expect("scenario");
        let r = simnet::run(&cfg, false).report;
        println!("{name}:");
        for d in &r.detections {
            println!(
                "  {} on {} at {} ms: {}",
                d.kind,
                d.target.as_ref().map_or("-", |t| t.as_str()),
                d.injected_at_ms,
                match (d.mechanism, d.detect_latency_ms) {
                    (Some(m), Some(l)) => format!("{m:?} after {l} ms, {} alarms at cc", d.alarms_to_cc),
                    _ => format!("undetected ({})", d.note.as_deref().unwrap_or("")),
                }
            );
        }
        for b in &r.chains.broken {
            println!("  broken: {} held by {} at block {} ({})", b.owner, b.holder, b.block_number, b.reason);
        }
    }
}
