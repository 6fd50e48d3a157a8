//! Tries to join each meter's HF and LF storage chains on identifiers and
//! key ids, with per-class pseudonyms and with the single-key control.

use gridchain::scenario::load_scenario;
use gridchain::simnet;

fn main() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios");
    for name in ["linking", "linking_single_key"] {
        let cfg = load_scenario(format!("{dir}/{name}.toml")).expect("scenario");
        let r = simnet::run(&cfg, false).report;
        let l = r.linking.expect("probe ran");
        println!(
            "{name}: {} of {} pairs linked ({} by identifier, {} by key id) over {} + {} chains",
            l.pairs_linked, r.topology.meters, l.by_identifier, l.by_key_id, l.cc_ledgers, l.utility_ledgers
        );
    }
}
