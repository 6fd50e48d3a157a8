use gridchain::ledger::{Destination, DeviceId, TxType};
use gridchain::metrics::{Class, MetricsReport};
use gridchain::miner::{KeyScheme, Record, StoredPayload, CC_STORAGE, U_STORAGE};
use gridchain::scenario::ScenarioConfig;
use gridchain::simnet::topology::{self, Link};
use gridchain::simnet;
use serde_json::Value;

const HOUR: u64 = 3_600_000;

fn small(extra: &str) -> ScenarioConfig {
    let text = format!(
        r#"
name = "flow"
seed = 7
horizon_ms = 21_600_000
audit_period_ms = 0
[topology]
ngws = 2
hgws_per_ngw = 2
meters_per_hgw = 3
han_pairs_per_hgw = 1
[broadcasts]
pricing_period_ms = 0
drms_period_ms = 0
{extra}
"#
    );
    let cfg = ScenarioConfig::from_toml(&text).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn clean(r: &MetricsReport) {
    assert!(r.violations.is_empty(), "{:?}", r.violations);
}

fn outcomes(r: &MetricsReport, tx: TxType) -> Vec<&str> {
    r.requests.iter().filter(|q| q.tx_type == tx).map(|q| q.outcome.as_str()).collect()
}

fn lines(log: &[u8]) -> Vec<Value> {
    log.split(|&b| b == b'\n').filter(|l| !l.is_empty()).map(|l| serde_json::from_slice(l).unwrap()).collect()
}

#[test]
fn meter_store_latency_is_links_plus_six_crypto_stages() {
    let cfg = small("");
    let r = simnet::run(&cfg, false).report;
    clean(&r);
    let hf = r.class(Class::HfStore);
    let t = &cfg.topology;
    let links = t.latency.of(Link::Han) + t.latency.of(Link::Nan) + t.latency.of(Link::Wired);
    assert_eq!(hf.crypto_stages_min, 6);
    assert_eq!(hf.latency.max_ms, links + 6 * t.overhead_ms());
    assert_eq!(hf.latency_without_crypto.max_ms, links);
}

#[test]
fn scheme_a_adds_the_gateway_reencryption_stage() {
    let cfg = ScenarioConfig { key_scheme: KeyScheme::A, ..small("") };
    let r = simnet::run(&cfg, false).report;
    clean(&r);
    assert_eq!(r.class(Class::HfStore).crypto_stages_max, 7);
}

#[test]
fn otft_reads_the_meter_register() {
    let target = topology::meter_id(1, 2, 3);
    let cfg = small(&format!("[[events]]\nkind = \"otft\"\ntarget = \"{target}\"\nat_ms = 7_200_000\n"));
    let out = simnet::run(&cfg, false);
    clean(&out.report);
    let q = &out.report.requests[0];
    assert_eq!(q.outcome, "answered");
    assert_eq!(q.latency_ms, Some(250));
    let meter = out.world.meter(&target).unwrap();
    assert!(q.register_wh.unwrap() > 0 && q.register_wh.unwrap() <= meter.read_now());
}

#[test]
fn ct_is_capped_per_day() {
    let target = topology::actuator_id(2, 1, 1);
    let mut extra = String::new();
    for (i, cmd) in ["off", "on", "off", "on", "off"].iter().enumerate() {
        extra += &format!("[[events]]\nkind = \"ct\"\ntarget = \"{target}\"\ncommand = \"{cmd}\"\nat_ms = {}\n", HOUR * (i as u64 + 1));
    }
    let out = simnet::run(&small(&extra), true);
    clean(&out.report);
    assert_eq!(outcomes(&out.report, TxType::Ct), ["answered", "answered", "answered", "answered", "exceeded"]);
    assert_eq!(out.report.drops.get("ct/exceeded"), Some(&1));
    let reached = lines(out.log.as_deref().unwrap())
        .iter()
        .filter(|v| v["class"] == "ct" && v["msg"] == "request" && v["outcome"] == "answered")
        .count();
    assert_eq!(reached, 4);
}

#[test]
fn utility_may_not_issue_otft() {
    let target = topology::meter_id(1, 1, 1);
    let cfg = small(&format!("[[events]]\nkind = \"otft\"\ntarget = \"{target}\"\nrequester = \"utility\"\nat_ms = 3_600_000\n"));
    let r = simnet::run(&cfg, false).report;
    clean(&r);
    assert_eq!(outcomes(&r, TxType::Otft), ["denied"]);
}

#[test]
fn offline_meter_times_out_then_answers() {
    let target = topology::meter_id(2, 2, 1);
    let cfg = small(&format!(
        "[[events]]\nkind = \"offline\"\ndevice = \"{target}\"\nat_ms = 3_000_000\n\
         [[events]]\nkind = \"otft\"\ntarget = \"{target}\"\nat_ms = 3_600_000\n\
         [[events]]\nkind = \"online\"\ndevice = \"{target}\"\nat_ms = 7_000_000\n\
         [[events]]\nkind = \"otft\"\ntarget = \"{target}\"\nat_ms = 7_200_000\n"
    ));
    let r = simnet::run(&cfg, false).report;
    clean(&r);
    assert_eq!(outcomes(&r, TxType::Otft), ["unreachable", "answered"]);
    // readings missed while offline are not replayed
    let c = &r.meters[target.as_str()];
    assert!(c.hf_forwarded < cfg.horizon_ms / cfg.periods.hf_ms);
}

#[test]
fn removed_meter_stops_storing_and_cannot_be_read() {
    let target = topology::meter_id(1, 1, 2);
    let cfg = small(&format!(
        "[[events]]\nkind = \"remove\"\ndevice = \"{target}\"\nat_ms = 7_300_000\n\
         [[events]]\nkind = \"otft\"\ntarget = \"{target}\"\nat_ms = 10_800_000\n"
    ));
    let out = simnet::run(&cfg, false);
    clean(&out.report);
    assert_eq!(outcomes(&out.report, TxType::Otft), ["denied"]);
    assert_eq!(out.report.meters[target.as_str()].hf_forwarded, 8);
    // the control-center chain closes with a removal record; the utility
    // chain admits no Remove and simply ends
    let removals = |s: &str| -> usize {
        let m = out.world.miner(&DeviceId::new(s).unwrap()).unwrap();
        m.ledgers().map(|(_, l)| l.transactions().filter(|(_, tx)| tx.tx_type == TxType::Remove).count()).sum()
    };
    assert_eq!((removals(CC_STORAGE), removals(U_STORAGE)), (1, 0));
}

#[test]
fn revoked_pair_stops_actuation_until_rekey() {
    let sensor = topology::sensor_id(1, 1, 1);
    let actuator = topology::actuator_id(1, 1, 1);
    let (revoke, rekey) = (2 * HOUR, 4 * HOUR);
    let cfg = small(&format!(
        "[[events]]\nkind = \"revoke_pair\"\nsensor = \"{sensor}\"\nat_ms = {revoke}\n\
         [[events]]\nkind = \"rekey_pair\"\nsensor = \"{sensor}\"\nat_ms = {rekey}\n"
    ));
    let out = simnet::run(&cfg, true);
    clean(&out.report);
    assert!(out.report.checks["revocation"] > 0);
    let actuated: Vec<u64> = lines(out.log.as_deref().unwrap())
        .iter()
        .filter(|v| v["dst"] == actuator.as_str() && v["outcome"] == "actuated")
        .map(|v| v["t"].as_u64().unwrap())
        .collect();
    // the revocation notice itself takes one HAN hop to land
    let settle = cfg.topology.latency.of(Link::Han) + cfg.topology.overhead_ms();
    assert!(actuated.iter().any(|&t| t < revoke));
    assert!(!actuated.iter().any(|&t| t > revoke + settle && t < rekey));
    assert!(actuated.iter().any(|&t| t > rekey));
}

#[test]
fn broadcast_lands_on_every_gateway_and_in_storage() {
    let cfg = small("[[events]]\nkind = \"broadcast\"\norigin = \"cc\"\nat_ms = 1_800_000\nbody = \"shed 10%\"\n");
    let out = simnet::run(&cfg, false);
    clean(&out.report);
    let w = &out.world;
    let gateways: Vec<_> = w.miners().filter(|m| !m.role.is_storage()).collect();
    assert_eq!(gateways.len(), 2 + 4);
    let digest = gateways[0].broadcast_copies().values().next().unwrap().digest;
    for g in &gateways {
        let copies = g.broadcast_copies();
        assert_eq!(copies.len(), 1, "{}", g.id);
        assert_eq!(copies.values().next().unwrap().digest, digest);
    }
    // each meter's control-center chain holds the record in storage
    let storage = w.miner(&DeviceId::new(CC_STORAGE).unwrap()).unwrap();
    let mut held = 0;
    for ((_, dest), l) in storage.ledgers() {
        if *dest != Destination::ControlCenter {
            continue;
        }
        for (_, tx) in l.transactions() {
            if let Ok(StoredPayload::Public(Record::Broadcast(b))) = StoredPayload::from_bytes(&tx.payload_cipher) {
                assert_eq!(b.body, b"shed 10%");
                held += 1;
            }
        }
    }
    assert_eq!(held, 12);
}

#[test]
fn link_delivery_is_first_in_first_out() {
    // scheme A makes a sealed store slower than a public record sent right
    // behind it; the receiver holds the record back instead of reordering
    let cfg = ScenarioConfig {
        key_scheme: KeyScheme::A,
        ..small("[[events]]\nkind = \"broadcast\"\norigin = \"cc\"\nat_ms = 900_000\n")
    };
    let out = simnet::run(&cfg, true);
    clean(&out.report);
    let held: Vec<Value> = lines(out.log.as_deref().unwrap())
        .into_iter()
        .filter(|v| v["trace"]["queued_ms"].as_u64().is_some_and(|q| q > 0))
        .collect();
    assert!(!held.is_empty());
    assert!(held.iter().all(|v| v["class"] == "broadcast_record"));
}
