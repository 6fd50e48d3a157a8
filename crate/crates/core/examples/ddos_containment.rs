//! A flooding meter against the hourly store limit, one window at a time.

use std::collections::BTreeMap;
use std::path::Path;

use gridchain::scenario::load_scenario;
use gridchain::simnet;

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/ddos.toml").into());
    let cfg = load_scenario(Path::new(&path)).expect("scenario");
    let out = simnet::run(&cfg, true);
    let r = &out.report;

    // (sender, receiver, hour) -> outcome counts, flood traffic only
    let mut windows: BTreeMap<(String, String, u64), BTreeMap<String, u64>> = BTreeMap::new();
    for line in String::from_utf8(out.log.unwrap()).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["class"] != "flood" || v["ev"] != "deliver" {
            continue;
        }
        let key = (v["src"].as_str().unwrap().into(), v["dst"].as_str().unwrap().into(), v["t"].as_u64().unwrap() / 3_600_000);
        *windows.entry(key).or_default().entry(v["outcome"].as_str().unwrap().into()).or_default() += 1;
    }
    for ((src, dst, hour), outcomes) in &windows {
        println!("hour {hour} {src} -> {dst}: {outcomes:?}");
    }
    for a in &r.alarms {
        println!("alarm at {} ms by {} about {}: {:?} -> {:?}", a.raised_at_ms, a.raised_by, a.subject, a.cause, a.delivered);
    }
    let siblings: Vec<u64> = r.meters.values().map(|m| m.hf_forwarded).collect();
    println!("hf stores per meter: min {} max {}", siblings.iter().min().unwrap(), siblings.iter().max().unwrap());
}
