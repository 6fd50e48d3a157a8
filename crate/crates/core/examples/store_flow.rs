//! Follows one meter reading from the meter to storage through the event
//! log, and shows the resulting local/remote chain pair.

use gridchain::ledger::{Destination, DeviceId};
use gridchain::scenario::ScenarioConfig;
use gridchain::simnet::{topology, World};

fn main() {
    let mut cfg = ScenarioConfig { name: "store_flow".into(), horizon_ms: 2 * 3_600_000, ..Default::default() };
    cfg.topology.ngws = 1;
    cfg.topology.hgws_per_ngw = 1;
    cfg.topology.meters_per_hgw = 2;
    cfg.topology.han_pairs_per_hgw = 0;

    let mut world = World::new(&cfg, true);
    world.run_to_end();
    let report = world.report();
    let log = String::from_utf8(world.take_log().unwrap()).unwrap();

    let meter = topology::meter_id(1, 1, 1);
    let chain = world.meter(&meter).unwrap().hf_chain.clone();
    println!("{meter} writes its HF data under {chain}");

    let first: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .filter(|v: &serde_json::Value| v["chain"] == chain.as_str())
        .take(3)
        .collect();
    for v in &first {
        let tr = &v["trace"];
        println!(
            "  t={} {} -> {} {} [{} ms links + {} stages] {}",
            v["t"], v["src"], v["dst"], v["msg"], tr["hops_ms"], tr["stages"], v["outcome"]
        );
    }

    let hgw = world.miner(&topology::hgw_id(1, 1)).unwrap();
    let storage = world.miner(&DeviceId::new("cc-storage").unwrap()).unwrap();
    let lbc = hgw.ledger(&chain, Destination::ControlCenter).unwrap();
    let rbc = storage.ledger(&chain, Destination::ControlCenter).unwrap();
    let (l, r) = (lbc.last_transaction_ref(&chain).unwrap(), rbc.last_transaction_ref(&chain).unwrap());
    println!("local head  #{} {}", l.tx_number, l.tx_digest.short());
    println!("remote head #{} {}", r.tx_number, r.tx_digest.short());

    let hf = &report.classes["hf_store"];
    println!("hf_store: {} delivered, mean {} ms ({} ms without crypto)", hf.forwarded, hf.latency.mean_ms, hf.latency_without_crypto.mean_ms);
    println!("violations: {}", report.violations.len());
}
