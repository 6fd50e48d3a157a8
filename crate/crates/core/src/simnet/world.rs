//! The simulated deployment: miners, devices, attackers and every message
//! between them, advanced one event at a time.
//!
//! Crypto cost is charged at the receiving end of each hop: a message that
//! needs `s` crypto stages on arrival is delivered `link + s * overhead`
//! after it was sent, and the receiver then handles it instantly. Every
//! message carries a trace so end-to-end latency can be split into link
//! time and crypto time.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::attack::{self, AttackSpec, DetectionRecord, LedgerView, LinkReport, Mechanism};
use crate::device::{HanDevicePair, Rtu, SmartMeter, Stream, Switch, HOUR_MS};
use crate::keys::{invalidate_key, Ciphertext, DataClass, KeyControl, KeyExchange, KeyId, KeySlot, KeyTable, SharedKey};
use crate::ledger::{sha256, Destination, DeviceId, DeviceMatch, Hasher, PartyId, PolicyHeader, PolicyRule, TxType};
use crate::metrics::{
    AlarmReport, BrokenChain, ChainSummary, Class, ClassStats, LogSummary, MeterCounts, MetricsReport, RequestReport,
    TopologySummary, Violation,
};
use crate::miner::{
    AlarmCause, AlarmDetail, AuditEntry, AuditOutcome, BroadcastFrame, BroadcastKind, DeviceSpec, Dropped, GridEvent,
    MinerState, Onboarding, PolicySource, Record, Role, StoreEnvelope, StoredPayload, Storages, CC, CC_STORAGE, UTILITY,
    U_STORAGE,
};
use crate::policy::AuthRequest;
use crate::scenario::{Limit, ScenarioConfig, ScriptEvent};
use crate::simnet::engine::{EventLog, EventQueue};
use crate::simnet::topology::{self, Link};

const SM_ENCRYPT: u32 = 1;
const RELAY: u32 = 1;
const STORAGE_SEALED: u32 = 2;
const STORAGE_PUBLIC: u32 = 1;

fn id(s: &str) -> DeviceId {
    DeviceId::new(s).expect("non-empty id")
}

/// Per-entity seed derived from the scenario seed.
fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut buf = seed.to_le_bytes().to_vec();
    buf.extend_from_slice(label.as_bytes());
    let d = sha256(&buf);
    u64::from_le_bytes(d.as_bytes()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy)]
struct Trace {
    id: u64,
    class: Class,
    born_ms: u64,
    hops_ms: u64,
    /// Time spent waiting behind earlier messages on a link.
    queued_ms: u64,
    stages: u32,
}

#[derive(Debug)]
enum Msg {
    DeviceStore { chain: DeviceId, dest: Destination, tx_type: TxType, ct: Ciphertext },
    Envelope(Box<StoreEnvelope>),
    Broadcast(Box<BroadcastFrame>),
    PairData { pair: usize, ct: Ciphertext },
    PairDeliver { pair: usize, ct: Ciphertext },
    KeyControl(KeyControl),
    KeyGrant { pair: usize, key: Box<SharedKey> },
    Request { id: u64, sig: Vec<u8> },
    Reply { id: u64, sig: Vec<u8> },
    AuditRead { chain: DeviceId, dest: Destination },
    AuditReply { chain: DeviceId, dest: Destination, entries: Vec<AuditEntry>, read_at_ms: u64 },
    Alarm { alarm: usize },
}

impl Msg {
    fn name(&self) -> &'static str {
        match self {
            Msg::DeviceStore { .. } => "device_store",
            Msg::Envelope(_) => "envelope",
            Msg::Broadcast(_) => "broadcast",
            Msg::PairData { .. } => "pair_data",
            Msg::PairDeliver { .. } => "pair_deliver",
            Msg::KeyControl(_) => "key_control",
            Msg::KeyGrant { .. } => "key_grant",
            Msg::Request { .. } => "request",
            Msg::Reply { .. } => "reply",
            Msg::AuditRead { .. } => "audit_read",
            Msg::AuditReply { .. } => "audit_reply",
            Msg::Alarm { .. } => "alarm",
        }
    }

    fn chain(&self) -> Option<&DeviceId> {
        match self {
            Msg::DeviceStore { chain, .. } | Msg::AuditRead { chain, .. } | Msg::AuditReply { chain, .. } => Some(chain),
            Msg::Envelope(env) => Some(&env.inner.device_id),
            _ => None,
        }
    }

    /// Short fingerprint of the ciphertext or payload a message carries.
    fn body(&self) -> Option<String> {
        let d = match self {
            Msg::DeviceStore { ct, .. } | Msg::PairData { ct, .. } | Msg::PairDeliver { ct, .. } => sha256(&ct.to_bytes()),
            Msg::Envelope(env) => env.inner.payload_digest,
            _ => return None,
        };
        Some(hex::encode(&d.as_bytes()[..8]))
    }
}

#[derive(Debug, Clone, Copy)]
enum Entity {
    Meter(usize),
    Pair(usize),
    Rtu(usize),
    Audit,
    Pricing,
    Drms,
    /// Flood attack index.
    Flood(usize),
}

#[derive(Debug)]
enum Ev {
    Deliver { src: PartyId, dst: PartyId, msg: Msg, trace: Trace },
    Tick(Entity, u64),
    Inject(usize),
    Script(usize),
    Timeout(u64),
}

#[derive(Serialize)]
struct Line<'a> {
    t: u64,
    seq: u64,
    ev: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    src: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dst: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    msg: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    chain: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    body: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<TraceLine>,
    outcome: &'a str,
}

/// Trace accounting as logged with each delivery.
#[derive(Serialize)]
struct TraceLine {
    id: u64,
    born_ms: u64,
    hops_ms: u64,
    #[serde(skip_serializing_if = "is_zero")]
    queued_ms: u64,
    stages: u32,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

struct MeterSlot {
    sm: SmartMeter,
    keys: KeyTable,
    removed: bool,
    genesis_ms: u64,
    counts: MeterCounts,
    /// Active flood window [start, end).
    flood: Option<(u64, u64)>,
}

struct PairSlot {
    pair: HanDevicePair,
    hgw: PartyId,
    sensor_keys: KeyTable,
    actuator_keys: KeyTable,
    sensor_key: Option<KeyId>,
}

struct RtuSlot {
    rtu: Rtu,
    keys: KeyTable,
}

/// A device chain that is mirrored to a storage miner.
struct ChainInfo {
    holder: PartyId,
    storage: PartyId,
    meter: Option<usize>,
    key_class: DataClass,
    in_flight: u32,
}

struct Request {
    id: u64,
    tx_type: TxType,
    requester: PartyId,
    target: DeviceId,
    ngw: PartyId,
    hgw: Option<PartyId>,
    command: Option<Switch>,
    issued_at_ms: u64,
    trace: Trace,
    value: Option<u64>,
    outcome: Option<String>,
    latency_ms: Option<u64>,
}

/// Everything a finished run produces.
pub struct RunOutput {
    pub report: MetricsReport,
    /// NDJSON event log, when kept.
    pub log: Option<Vec<u8>>,
    pub world: World,
}

pub struct World {
    cfg: ScenarioConfig,
    now: u64,
    overhead: u64,
    queue: EventQueue<Ev>,
    log: EventLog,
    rng: ChaCha20Rng,
    kex: KeyExchange,
    hasher: Hasher,
    gateways: BTreeMap<PartyId, MinerState>,
    cc_storage: MinerState,
    u_storage: MinerState,
    cc_keys: KeyTable,
    ngw_ids: Vec<PartyId>,
    hgws_of: BTreeMap<PartyId, Vec<PartyId>>,
    meters: Vec<MeterSlot>,
    meter_index: HashMap<DeviceId, usize>,
    meters_of: BTreeMap<PartyId, Vec<usize>>,
    pairs: Vec<PairSlot>,
    pair_by_sensor: HashMap<DeviceId, usize>,
    pair_by_actuator: HashMap<DeviceId, usize>,
    rtus: Vec<RtuSlot>,
    chains: BTreeMap<(DeviceId, Destination), ChainInfo>,
    offline: HashSet<DeviceId>,
    stats: BTreeMap<Class, ClassStats>,
    drops: BTreeMap<String, u64>,
    checks: BTreeMap<String, u64>,
    violations: Vec<Violation>,
    alarms: Vec<AlarmReport>,
    detections: Vec<DetectionRecord>,
    tampered: HashSet<(DeviceId, Destination)>,
    pending_rbc: HashMap<(DeviceId, Destination), Vec<usize>>,
    pending_both: HashMap<(DeviceId, Destination), Vec<(usize, u64)>>,
    ddos_watch: HashMap<DeviceId, usize>,
    audit_seen: HashSet<(PartyId, DeviceId, Vec<u64>, usize)>,
    broadcasts: Vec<BroadcastFrame>,
    requests: BTreeMap<u64, Request>,
    linking: Option<LinkReport>,
    chain_summary: Option<ChainSummary>,
    next_trace: u64,
    /// Earliest delivery time still free on each directed link.
    link_free: HashMap<(PartyId, PartyId), u64>,
    next_request: u64,
    forwards: u64,
    authorizations: u64,
}

fn allow(req: &PartyId, t: TxType, dev: impl Into<DeviceMatch>, l: Limit) -> PolicyRule {
    PolicyRule::allow(req.clone(), t, dev, l.count, l.per)
}

impl World {
    /// Builds and onboards the whole deployment at t = 0 and schedules the
    /// periodic and scripted activity.
    pub fn new(cfg: &ScenarioConfig, keep_log: bool) -> Self {
        let cfg = cfg.clone();
        let t = &cfg.topology;
        let l = cfg.limits.clone();
        let hasher = Hasher::sha256();
        let (cc, utility) = (id(CC), id(UTILITY));
        let cap = cfg.block_capacity;

        let mut kex = KeyExchange::new(sub_seed(cfg.seed, "kex"));
        let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(cfg.seed, "world"));
        for p in [&cc, &utility, &id(CC_STORAGE), &id(U_STORAGE)] {
            kex.register(p);
        }

        let ngw_ids = t.ngw_ids();
        let mut storage_rules = Vec::new();
        for n in &ngw_ids {
            storage_rules.push(allow(n, TxType::Store, DeviceMatch::Any, l.relay));
            storage_rules.push(allow(n, TxType::Ebt, DeviceMatch::Any, l.ebt));
            storage_rules.push(allow(n, TxType::Remove, DeviceMatch::Any, l.remove));
            storage_rules.push(allow(n, TxType::Access, DeviceMatch::Any, l.audit_read));
        }
        let storage =
            |name: &str, role| MinerState::with_capacity(id(name), role, PolicyHeader::new(storage_rules.clone()), 0, cap, hasher);
        let mut cc_storage = storage(CC_STORAGE, Role::CcStorage);
        let mut u_storage = storage(U_STORAGE, Role::UStorage);

        let gateway_rules = vec![
            allow(&cc, TxType::Otft, DeviceMatch::Any, l.otft),
            allow(&cc, TxType::Ct, DeviceMatch::Any, l.ct),
            allow(&utility, TxType::Store, DeviceMatch::Any, l.broadcast),
            allow(&cc, TxType::Store, DeviceMatch::Any, l.broadcast),
        ];

        let mut w = World {
            overhead: t.overhead_ms(),
            now: 0,
            queue: EventQueue::new(),
            log: EventLog::new(keep_log),
            hasher,
            gateways: BTreeMap::new(),
            cc_keys: KeyTable::new(),
            ngw_ids: ngw_ids.clone(),
            hgws_of: BTreeMap::new(),
            meters: Vec::new(),
            meter_index: HashMap::new(),
            meters_of: BTreeMap::new(),
            pairs: Vec::new(),
            pair_by_sensor: HashMap::new(),
            pair_by_actuator: HashMap::new(),
            rtus: Vec::new(),
            chains: BTreeMap::new(),
            offline: HashSet::new(),
            stats: BTreeMap::new(),
            drops: BTreeMap::new(),
            checks: BTreeMap::new(),
            violations: Vec::new(),
            alarms: Vec::new(),
            detections: Vec::new(),
            tampered: HashSet::new(),
            pending_rbc: HashMap::new(),
            pending_both: HashMap::new(),
            ddos_watch: HashMap::new(),
            audit_seen: HashSet::new(),
            broadcasts: Vec::new(),
            requests: BTreeMap::new(),
            linking: None,
            chain_summary: None,
            next_trace: 1,
            link_free: HashMap::new(),
            next_request: 1,
            forwards: 0,
            authorizations: 0,
            cc_storage: MinerState::new(id("placeholder"), Role::CcStorage, PolicyHeader::default(), 0),
            u_storage: MinerState::new(id("placeholder"), Role::UStorage, PolicyHeader::default(), 0),
            kex: KeyExchange::new(0),
            rng: ChaCha20Rng::seed_from_u64(0),
            cfg: ScenarioConfig::default(),
        };

        for (ni, ngw_id) in ngw_ids.iter().enumerate() {
            let n = ni as u32 + 1;
            let mut rules = gateway_rules.clone();
            let hgw_ids: Vec<PartyId> = (1..=t.hgws_per_ngw).map(|h| topology::hgw_id(n, h)).collect();
            for h in &hgw_ids {
                rules.push(allow(h, TxType::Store, h.clone(), l.miner_outbound));
                rules.push(allow(h, TxType::Store, DeviceMatch::Any, l.relay));
                rules.push(allow(h, TxType::Ebt, DeviceMatch::Any, l.ebt));
                rules.push(allow(h, TxType::Remove, DeviceMatch::Any, l.remove));
            }
            let mut ngw = MinerState::with_capacity(ngw_id.clone(), Role::Ngw, PolicyHeader::new(rules), 0, cap, hasher);
            kex.register(ngw_id);
            let key = kex.establish_among(&mut w.cc_keys, &[&cc, ngw_id], DataClass::Generic, ngw_id).expect("fresh slot");
            ngw.keys.insert(key).expect("fresh slot");

            for (hi, hgw_id) in hgw_ids.iter().enumerate() {
                let h = hi as u32 + 1;
                let mut hgw =
                    MinerState::with_capacity(hgw_id.clone(), Role::Hgw, PolicyHeader::new(gateway_rules.clone()), 0, cap, hasher);
                hgw.parent = Some(ngw_id.clone());
                ngw.children.insert(hgw_id.clone());
                kex.register(hgw_id);
                let key = kex.establish_among(&mut ngw.keys, &[ngw_id, hgw_id], DataClass::Generic, hgw_id).expect("fresh slot");
                hgw.keys.insert(key).expect("fresh slot");

                for m in 1..=t.meters_per_hgw {
                    let real = topology::meter_id(n, h, m);
                    kex.register(&real);
                    let (hf_chain, lf_chain) = if cfg.per_class_keys {
                        (pseudonym(&mut rng), pseudonym(&mut rng))
                    } else {
                        (real.clone(), real.clone())
                    };
                    let spec = DeviceSpec::Meter {
                        id: real.clone(),
                        hf_chain: hf_chain.clone(),
                        lf_chain: lf_chain.clone(),
                        hf_policy: vec![
                            allow(&hf_chain, TxType::Store, hf_chain.clone(), l.hf_store),
                            allow(&hf_chain, TxType::Ebt, hf_chain.clone(), l.ebt),
                        ],
                        lf_policy: vec![allow(&lf_chain, TxType::Store, lf_chain.clone(), l.lf_store)],
                        per_class_keys: cfg.per_class_keys,
                    };
                    let mut keys = KeyTable::new();
                    let mut ob = Onboarding { kex: &mut kex, device_keys: &mut keys, scheme: cfg.key_scheme, now_ms: 0 };
                    hgw.add_device(Some(Storages { cc: &mut cc_storage, utility: &mut u_storage }), &mut ob, &spec)
                        .expect("fresh meter onboards");
                    let mut sm = SmartMeter::new(real.clone(), hgw_id.clone(), sub_seed(cfg.seed, real.as_str()))
                        .with_periods(cfg.periods.hf_ms, cfg.periods.lf_ms);
                    sm.hf_chain = hf_chain.clone();
                    sm.lf_chain = lf_chain.clone();
                    sm.hfuk = hgw.chain_keys(&hf_chain, Destination::ControlCenter).map(|k| k.inbound);
                    sm.lfuk = hgw.chain_keys(&lf_chain, Destination::Utility).map(|k| k.inbound);
                    let idx = w.meters.len();
                    let (hf_class, lf_class) = if cfg.per_class_keys {
                        (DataClass::HighFreq, DataClass::LowFreq)
                    } else {
                        (DataClass::Generic, DataClass::Generic)
                    };
                    for (chain, dest, storage, key_class) in [
                        (&hf_chain, Destination::ControlCenter, CC_STORAGE, hf_class),
                        (&lf_chain, Destination::Utility, U_STORAGE, lf_class),
                    ] {
                        w.chains.insert(
                            (chain.clone(), dest),
                            ChainInfo { holder: hgw_id.clone(), storage: id(storage), meter: Some(idx), key_class, in_flight: 0 },
                        );
                    }
                    w.meter_index.insert(real, idx);
                    w.meters_of.entry(hgw_id.clone()).or_default().push(idx);
                    w.meters.push(MeterSlot {
                        sm,
                        keys,
                        removed: false,
                        genesis_ms: 0,
                        counts: MeterCounts::default(),
                        flood: None,
                    });
                }

                for p in 1..=t.han_pairs_per_hgw {
                    let (sensor, actuator) = (topology::sensor_id(n, h, p), topology::actuator_id(n, h, p));
                    kex.register(&sensor);
                    kex.register(&actuator);
                    let mut sensor_keys = KeyTable::new();
                    let mut actuator_keys = KeyTable::new();
                    for (dev, policy, table) in [
                        (&sensor, vec![allow(&sensor, TxType::Access, actuator.clone(), l.access)], &mut sensor_keys),
                        (&actuator, vec![], &mut actuator_keys),
                    ] {
                        let mut ob = Onboarding { kex: &mut kex, device_keys: table, scheme: cfg.key_scheme, now_ms: 0 };
                        hgw.add_device(None, &mut ob, &DeviceSpec::HanDevice { id: dev.clone(), policy })
                            .expect("fresh device onboards");
                    }
                    let policy = hgw
                        .ledger(&sensor, Destination::Local)
                        .and_then(|l| l.current_policy().ok())
                        .cloned()
                        .expect("sensor chain exists");
                    let key = kex.allocate_pair_key(&mut hgw.keys, &policy, 0, &sensor, &actuator).expect("policy grants access");
                    sensor_keys.insert(key.clone()).expect("fresh slot");
                    actuator_keys.insert(key.clone()).expect("fresh slot");
                    let mut pair = HanDevicePair::new(sensor.clone(), actuator.clone(), sub_seed(cfg.seed, sensor.as_str()));
                    pair.report_period_ms = cfg.periods.sensor_ms;
                    pair.pair_key = Some(key.key_id());
                    let idx = w.pairs.len();
                    w.pair_by_sensor.insert(sensor, idx);
                    w.pair_by_actuator.insert(actuator, idx);
                    w.pairs.push(PairSlot { pair, hgw: hgw_id.clone(), sensor_keys, actuator_keys, sensor_key: Some(key.key_id()) });
                }
                w.gateways.insert(hgw_id.clone(), hgw);
            }

            for r in 1..=t.rtus_per_ngw {
                let rid = topology::rtu_id(n, r);
                kex.register(&rid);
                let mut keys = KeyTable::new();
                let mut ob = Onboarding { kex: &mut kex, device_keys: &mut keys, scheme: cfg.key_scheme, now_ms: 0 };
                let spec = DeviceSpec::Rtu { id: rid.clone(), policy: vec![allow(&rid, TxType::Store, rid.clone(), l.rtu_store)] };
                ngw.add_device(Some(Storages { cc: &mut cc_storage, utility: &mut u_storage }), &mut ob, &spec)
                    .expect("fresh RTU onboards");
                let mut rtu = Rtu::new(rid.clone(), ngw_id.clone(), sub_seed(cfg.seed, rid.as_str()));
                rtu.report_period_ms = cfg.periods.rtu_ms;
                rtu.key = ngw.chain_keys(&rid, Destination::ControlCenter).map(|k| k.inbound);
                w.chains.insert(
                    (rid, Destination::ControlCenter),
                    ChainInfo {
                        holder: ngw_id.clone(),
                        storage: id(CC_STORAGE),
                        meter: None,
                        key_class: DataClass::Generic,
                        in_flight: 0,
                    },
                );
                w.rtus.push(RtuSlot { rtu, keys });
            }
            w.hgws_of.insert(ngw_id.clone(), hgw_ids);
            w.gateways.insert(ngw_id.clone(), ngw);
        }

        w.cc_storage = cc_storage;
        w.u_storage = u_storage;
        w.kex = kex;
        w.rng = rng;
        w.cfg = cfg;
        for seed in w.cfg.policies.clone() {
            let rule = seed.rule();
            if let Some(m) = w.miner_mut(&seed.scope) {
                m.set_policy(rule).expect("validated rule");
            }
        }
        w.schedule_initial();
        w
    }

    fn schedule_initial(&mut self) {
        let horizon = self.cfg.horizon_ms;
        for i in 0..self.meters.len() {
            let at = self.meters[i].sm.next_boundary(0);
            self.tick_at(Entity::Meter(i), at, 0);
        }
        for i in 0..self.pairs.len() {
            let at = self.pairs[i].pair.report_period_ms;
            self.tick_at(Entity::Pair(i), at, 0);
        }
        for i in 0..self.rtus.len() {
            let at = self.rtus[i].rtu.next_boundary(0);
            self.tick_at(Entity::Rtu(i), at, 0);
        }
        if self.cfg.audit_period_ms > 0 {
            self.tick_at(Entity::Audit, self.cfg.audit_period_ms, 0);
        }
        let b = self.cfg.broadcasts.clone();
        if b.pricing_period_ms > 0 {
            self.tick_at(Entity::Pricing, b.offset_ms, 0);
        }
        if b.drms_period_ms > 0 {
            self.tick_at(Entity::Drms, b.offset_ms, 0);
        }
        for i in 0..self.cfg.events.len() {
            let at = self.cfg.events[i].at_ms();
            if at <= horizon {
                self.queue.schedule(at, Ev::Script(i));
            }
        }
        for i in 0..self.cfg.attacks.len() {
            let spec = &self.cfg.attacks[i];
            self.detections.push(DetectionRecord {
                attack_id: i,
                kind: spec.name().to_string(),
                target: spec.target().cloned(),
                injected_at_ms: spec.start_ms().unwrap_or(horizon),
                detected: false,
                mechanism: None,
                detect_latency_ms: None,
                alarms_to_cc: 0,
                note: None,
            });
            match spec.start_ms() {
                Some(at) if at <= horizon => {
                    self.queue.schedule(at, Ev::Inject(i));
                }
                Some(_) => self.detections[i].note = Some("injection time beyond horizon".into()),
                None => {}
            }
        }
    }

    fn tick_at(&mut self, e: Entity, at: u64, k: u64) {
        if at <= self.cfg.horizon_ms {
            self.queue.schedule(at, Ev::Tick(e, k));
        }
    }

    // ----- accessors -----

    pub fn now_ms(&self) -> u64 {
        self.now
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn miner(&self, id: &PartyId) -> Option<&MinerState> {
        match id.as_str() {
            CC_STORAGE => Some(&self.cc_storage),
            U_STORAGE => Some(&self.u_storage),
            _ => self.gateways.get(id),
        }
    }

    pub fn miner_mut(&mut self, id: &PartyId) -> Option<&mut MinerState> {
        match id.as_str() {
            CC_STORAGE => Some(&mut self.cc_storage),
            U_STORAGE => Some(&mut self.u_storage),
            _ => self.gateways.get_mut(id),
        }
    }

    /// Every miner, storage last.
    pub fn miners(&self) -> impl Iterator<Item = &MinerState> {
        self.gateways.values().chain([&self.cc_storage, &self.u_storage])
    }

    pub fn meter(&self, real_id: &DeviceId) -> Option<&SmartMeter> {
        self.meter_index.get(real_id).map(|&i| &self.meters[i].sm)
    }

    pub fn meter_ids(&self) -> impl Iterator<Item = &DeviceId> {
        self.meters.iter().map(|m| &m.sm.device_id)
    }

    pub fn actuator_state(&self, actuator: &DeviceId) -> Option<Switch> {
        self.pair_by_actuator.get(actuator).map(|&i| self.pairs[i].pair.actuator_state)
    }

    pub fn pair_key(&self, sensor: &DeviceId) -> Option<KeyId> {
        self.pair_by_sensor.get(sensor).and_then(|&i| self.pairs[i].pair.pair_key)
    }

    pub fn key_messages(&self) -> u64 {
        self.kex.messages()
    }

    // ----- messaging -----

    fn stat(&mut self, c: Class) -> &mut ClassStats {
        self.stats.entry(c).or_default()
    }

    fn new_trace(&mut self, class: Class) -> Trace {
        let id = self.next_trace;
        self.next_trace += 1;
        self.stat(class).generated += 1;
        Trace { id, class, born_ms: self.now, hops_ms: 0, queued_ms: 0, stages: 0 }
    }

    fn link_ms(&self, link: Link) -> u64 {
        self.cfg.topology.latency.of(link)
    }

    fn send(&mut self, src: &PartyId, dst: &PartyId, link: Link, stages: u32, msg: Msg, mut trace: Trace) {
        let hop = self.link_ms(link);
        trace.hops_ms += hop;
        trace.stages += stages;
        let ready = self.now + hop + stages as u64 * self.overhead;
        // a receiver handles each sender's messages in arrival order
        let free = self.link_free.entry((src.clone(), dst.clone())).or_default();
        let at = ready.max(*free);
        *free = at;
        trace.queued_ms += at - ready;
        self.queue.schedule(at, Ev::Deliver { src: src.clone(), dst: dst.clone(), msg, trace });
    }

    /// Miner-to-miner forward backed by an authorization.
    fn forward(&mut self, src: &PartyId, dst: &PartyId, link: Link, stages: u32, msg: Msg, trace: Trace) {
        self.forwards += 1;
        self.send(src, dst, link, stages, msg, trace);
    }

    fn authorized(&mut self) {
        self.authorizations += 1;
    }

    fn violation(&mut self, invariant: &str, detail: String) {
        self.violations.push(Violation { invariant: invariant.into(), at_ms: self.now, detail });
    }

    fn check(&mut self, name: &str) {
        *self.checks.entry(name.to_string()).or_default() += 1;
    }

    /// End of a traced message's life: records its latency and verifies
    /// that it splits exactly into link time and crypto time.
    fn arrived(&mut self, trace: &Trace) {
        let latency = self.now - trace.born_ms;
        let expected = trace.hops_ms + trace.queued_ms + trace.stages as u64 * self.overhead;
        self.check("latency_additivity");
        if latency != expected {
            self.violation("latency_additivity", format!("trace {}: {latency} ms != {expected} ms", trace.id));
        }
        self.stat(trace.class).delivered(latency, trace.hops_ms + trace.queued_ms, trace.stages);
    }

    fn refused(&mut self, class: Class, reason: &str, policy: bool) {
        let s = self.stat(class);
        if policy {
            s.dropped += 1;
        } else {
            s.rejected += 1;
        }
        *self.drops.entry(format!("{}/{reason}", class.name())).or_default() += 1;
    }

    /// Counts a refusal at `miner` and raises the alarm on the first excess
    /// of a window.
    fn refuse(&mut self, miner: &PartyId, class: Class, d: &Dropped, subject: &DeviceId, tx_type: TxType) -> &'static str {
        let reason = match d {
            Dropped::Denied(_) => "denied",
            Dropped::Exceeded { .. } => "exceeded",
            Dropped::AuthFailure => "auth_failure",
            Dropped::UnknownChain(_) => "unknown_chain",
            Dropped::Malformed => "malformed",
            Dropped::Mismatch => "mismatch",
        };
        self.refused(class, reason, matches!(d, Dropped::Denied(_) | Dropped::Exceeded { .. }));
        if let Dropped::Exceeded { count, window_start_ms, first: true } = d {
            let detail = AlarmDetail::Excess { tx_type, window_start_ms: *window_start_ms, count: *count };
            self.raise(miner, AlarmCause::ExcessTraffic, subject, detail);
        }
        reason
    }

    fn raise(&mut self, miner: &PartyId, cause: AlarmCause, subject: &DeviceId, detail: AlarmDetail) {
        let now = self.now;
        let Some(m) = self.miner_mut(miner) else { return };
        let (frame, routes) = m.raise_alarm(cause, subject, detail, now);
        let idx = self.alarms.len();
        self.alarms.push(AlarmReport {
            raised_at_ms: now,
            raised_by: miner.to_string(),
            cause,
            subject: subject.to_string(),
            detail: frame.detail,
            delivered: Vec::new(),
        });
        if cause == AlarmCause::ExcessTraffic {
            if let Some(&a) = self.ddos_watch.get(subject) {
                let d = &mut self.detections[a];
                if !d.detected {
                    d.detected = true;
                    d.mechanism = Some(Mechanism::RateLimit);
                    d.detect_latency_ms = Some(now - d.injected_at_ms);
                }
            }
        }
        for to in routes {
            let link = if to.as_str().starts_with("customer/") { Link::Han } else { Link::Cellular };
            let trace = self.new_trace(Class::Alarm);
            self.send(miner, &to, link, 1, Msg::Alarm { alarm: idx }, trace);
        }
    }

    fn storage_for(dest: Destination) -> PartyId {
        match dest {
            Destination::Utility => id(U_STORAGE),
            _ => id(CC_STORAGE),
        }
    }

    fn local_stages(&self) -> u32 {
        match self.cfg.key_scheme {
            crate::miner::KeyScheme::B => 2,
            crate::miner::KeyScheme::A => 3,
        }
    }

    fn chain_done(&mut self, chain: &DeviceId, dest: Destination) {
        if let Some(c) = self.chains.get_mut(&(chain.clone(), dest)) {
            c.in_flight = c.in_flight.saturating_sub(1);
        }
    }

    // ----- main loop -----

    /// Processes events until the queue is empty. Periodic activity stops
    /// at the horizon; messages already in flight are still delivered.
    pub fn run_to_end(&mut self) {
        while let Some((at, seq, ev)) = self.queue.pop() {
            self.now = at;
            self.step(seq, ev);
        }
        self.finish();
    }

    fn step(&mut self, seq: u64, ev: Ev) {
        match ev {
            Ev::Deliver { src, dst, msg, trace } => {
                let name = msg.name();
                let chain = msg.chain().cloned();
                let body = msg.body();
                let outcome = self.deliver(&src, &dst, msg, trace);
                self.log.record(&Line {
                    t: self.now,
                    seq,
                    ev: "deliver",
                    src: Some(src.as_str()),
                    dst: Some(dst.as_str()),
                    msg: Some(name),
                    class: Some(trace.class.name()),
                    chain: chain.as_ref().map(|c| c.as_str()),
                    body,
                    trace: Some(TraceLine {
                        id: trace.id,
                        born_ms: trace.born_ms,
                        hops_ms: trace.hops_ms,
                        queued_ms: trace.queued_ms,
                        stages: trace.stages,
                    }),
                    outcome,
                });
            }
            Ev::Tick(e, k) => {
                let (label, outcome) = self.tick(e, k);
                self.log_plain(seq, "tick", label.as_deref(), outcome);
            }
            Ev::Inject(i) => {
                let outcome = self.inject(i);
                let name = self.cfg.attacks[i].name();
                self.log_plain(seq, "inject", Some(name), &outcome);
            }
            Ev::Script(i) => {
                let outcome = self.script(i);
                self.log_plain(seq, "script", None, &outcome);
            }
            Ev::Timeout(r) => {
                let outcome = if self.resolve(r, "unreachable", None) { "unreachable" } else { "resolved" };
                self.log_plain(seq, "timeout", None, outcome);
            }
        }
    }

    fn log_plain(&mut self, seq: u64, ev: &str, what: Option<&str>, outcome: &str) {
        self.log.record(&Line {
            t: self.now,
            seq,
            ev,
            src: what,
            dst: None,
            msg: None,
            class: None,
            chain: None,
            body: None,
            trace: None,
            outcome,
        });
    }

    // ----- periodic activity -----

    fn tick(&mut self, e: Entity, k: u64) -> (Option<String>, &'static str) {
        let now = self.now;
        match e {
            Entity::Meter(i) => {
                let slot = &mut self.meters[i];
                if slot.removed {
                    return (Some(slot.sm.device_id.to_string()), "removed");
                }
                let readings = slot.sm.tick(now);
                let next = slot.sm.next_boundary(now);
                let label = Some(slot.sm.device_id.to_string());
                let flooding = slot.flood.is_some_and(|(s, e)| s <= now && now < e);
                let online = !self.offline.contains(&slot.sm.device_id);
                for r in readings {
                    if !online || (flooding && r.stream == Stream::Hf) {
                        continue;
                    }
                    let class = if r.stream == Stream::Hf { Class::HfStore } else { Class::LfStore };
                    let rec = Record::Reading { at_ms: r.at_ms, register_wh: r.register_wh };
                    self.meter_emit(i, r.stream, TxType::Store, rec, class);
                }
                self.tick_at(e, next, 0);
                (label, if online { "emitted" } else { "offline" })
            }
            Entity::Pair(i) => {
                let period = self.pairs[i].pair.report_period_ms;
                self.tick_at(e, now + period, 0);
                let sensor = self.pairs[i].pair.sensor_id.clone();
                let slot = &mut self.pairs[i];
                let Some(k) = slot.sensor_key.filter(|k| slot.sensor_keys.is_valid(*k)) else {
                    return (Some(sensor.to_string()), "no_key");
                };
                let value = slot.pair.sample();
                let pt = Record::Sample { at_ms: now, value }.to_bytes();
                let ct = slot.sensor_keys.get_mut(k).and_then(|key| key.encrypt(&sensor, &pt)).expect("valid key encrypts");
                let hgw = slot.hgw.clone();
                let trace = self.new_trace(Class::Access);
                // sensor encrypts, HGW hashes the access log entry
                self.send(&sensor, &hgw, Link::Han, 2, Msg::PairData { pair: i, ct }, trace);
                (Some(sensor.to_string()), "emitted")
            }
            Entity::Rtu(i) => {
                let slot = &mut self.rtus[i];
                let next = slot.rtu.next_boundary(now);
                let rid = slot.rtu.device_id.clone();
                let ngw = slot.rtu.ngw.clone();
                if let (Some(v), Some(k)) = (slot.rtu.tick(now), slot.rtu.key) {
                    let pt = Record::Reading { at_ms: now, register_wh: v }.to_bytes();
                    if let Ok(ct) = slot.keys.get_mut(k).and_then(|key| key.encrypt(&rid, &pt)) {
                        let trace = self.new_trace(Class::RtuStore);
                        let msg = Msg::DeviceStore { chain: rid.clone(), dest: Destination::ControlCenter, tx_type: TxType::Store, ct };
                        let stages = SM_ENCRYPT + self.local_stages();
                        self.send(&rid, &ngw, Link::Nan, stages, msg, trace);
                    }
                }
                self.tick_at(e, next, 0);
                (Some(rid.to_string()), "emitted")
            }
            Entity::Audit => {
                self.audit_round();
                self.tick_at(e, now + self.cfg.audit_period_ms, 0);
                (None, "audit_round")
            }
            Entity::Pricing | Entity::Drms => {
                let (origin, kind, period) = match e {
                    Entity::Pricing => (id(UTILITY), BroadcastKind::Pricing, self.cfg.broadcasts.pricing_period_ms),
                    _ => (id(CC), BroadcastKind::Drms, self.cfg.broadcasts.drms_period_ms),
                };
                let body = format!("{kind:?} signal {k}").into_bytes();
                self.broadcast(&origin, kind, body);
                self.tick_at(e, now + period, k + 1);
                (Some(origin.to_string()), "broadcast")
            }
            Entity::Flood(a) => {
                let AttackSpec::Ddos { device, rate_per_hour, start_ms, duration_ms } = self.cfg.attacks[a].clone() else {
                    return (None, "not_a_flood");
                };
                self.flood_once(&device, now);
                let next = start_ms + (k + 1) * HOUR_MS / rate_per_hour as u64;
                if next < start_ms + duration_ms {
                    self.tick_at(e, next, k + 1);
                }
                (Some(device.to_string()), "flood")
            }
        }
    }

    /// Encrypts a meter record under the stream's key and sends it to the HGW.
    fn meter_emit(&mut self, i: usize, stream: Stream, tx_type: TxType, rec: Record, class: Class) {
        let slot = &mut self.meters[i];
        let sender = slot.sm.device_id.clone();
        let chain = slot.sm.chain(stream).clone();
        let dest = match stream {
            Stream::Hf => Destination::ControlCenter,
            Stream::Lf => Destination::Utility,
        };
        let Some(k) = slot.sm.key(stream) else { return };
        let Ok(ct) = slot.keys.get_mut(k).and_then(|key| key.encrypt(&sender, &rec.to_bytes())) else {
            return;
        };
        let hgw = slot.sm.hgw.clone();
        match class {
            Class::Ebt | Class::Flood | Class::HfStore | Class::LfStore => {}
            _ => debug_assert!(false, "meter class"),
        }
        let trace = self.new_trace(class);
        let stages = SM_ENCRYPT + self.local_stages();
        self.send(&sender, &hgw, Link::Han, stages, Msg::DeviceStore { chain, dest, tx_type, ct }, trace);
    }

    fn flood_once(&mut self, device: &DeviceId, now: u64) {
        if let Some(&i) = self.meter_index.get(device) {
            let register_wh = self.meters[i].sm.read_now();
            self.meter_emit(i, Stream::Hf, TxType::Store, Record::Reading { at_ms: now, register_wh }, Class::Flood);
            return;
        }
        // compromised HGW pushing its own chain outbound
        let Some(hgw) = self.gateways.get_mut(device) else { return };
        let at = hgw.append_own(TxType::Store, Record::Reading { at_ms: now, register_wh: 0 }, None, now);
        let own = hgw.own_chain();
        let inner = own.transaction(at).expect("just appended").clone();
        let head = own.last_transaction_ref(device).expect("just appended");
        let env = StoreEnvelope {
            inner,
            destination: Destination::ControlCenter,
            auth_block_number: head.block_number,
            auth_tx_digest: head.tx_digest,
        };
        let ngw = hgw.parent.clone().expect("HGW has an NGW");
        let trace = self.new_trace(Class::Flood);
        self.send(device, &ngw, Link::Nan, RELAY, Msg::Envelope(Box::new(env)), trace);
    }

    /// Issues a broadcast from `origin` to every NGW. Returns its id.
    pub fn broadcast(&mut self, origin: &PartyId, kind: BroadcastKind, body: Vec<u8>) -> u64 {
        let bid = self.broadcasts.len() as u64 + 1;
        let frame = BroadcastFrame { id: bid, origin: origin.clone(), kind, issued_at_ms: self.now, body };
        self.broadcasts.push(frame.clone());
        for ngw in self.ngw_ids.clone() {
            let trace = self.new_trace(Class::Control);
            self.send(origin, &ngw, Link::Cellular, 1, Msg::Broadcast(Box::new(frame.clone())), trace);
        }
        bid
    }

    fn audit_round(&mut self) {
        let k = self.cfg.auditors_per_target;
        let targets: Vec<(DeviceId, Destination, PartyId)> = self
            .chains
            .iter()
            .filter_map(|((c, d), info)| {
                let m = info.meter?;
                if self.meters[m].removed {
                    return None;
                }
                let hgw = &self.meters[m].sm.hgw;
                let own_ngw = self.gateways[hgw].parent.clone()?;
                Some((c.clone(), *d, own_ngw))
            })
            .collect();
        for (chain, dest, own) in targets {
            let auditors: Vec<PartyId> = self.ngw_ids.iter().filter(|n| **n != own).take(k).cloned().collect();
            let storage = Self::storage_for(dest);
            for a in auditors {
                let trace = self.new_trace(Class::Audit);
                self.send(&a, &storage, Link::Wired, 1, Msg::AuditRead { chain: chain.clone(), dest }, trace);
            }
        }
    }

    // ----- deliveries -----

    fn deliver(&mut self, src: &PartyId, dst: &PartyId, msg: Msg, trace: Trace) -> &'static str {
        match msg {
            Msg::DeviceStore { chain, dest, tx_type, ct } => self.on_device_store(dst, chain, dest, tx_type, ct, trace),
            Msg::Envelope(env) => match dst.as_str() {
                CC_STORAGE | U_STORAGE => self.on_storage_envelope(src, dst, *env, trace),
                _ => self.on_relay(src, dst, *env, trace),
            },
            Msg::Broadcast(frame) => self.on_broadcast(dst, *frame, trace),
            Msg::PairData { pair, ct } => self.on_pair_data(dst, pair, ct, trace),
            Msg::PairDeliver { pair, ct } => self.on_pair_deliver(pair, ct, trace),
            Msg::KeyControl(ctl) => self.on_key_control(dst, &ctl, trace),
            Msg::KeyGrant { pair, key } => self.on_key_grant(dst, pair, *key, trace),
            Msg::Request { id, sig } => {
                self.carry(id, trace);
                self.on_request(dst, id, sig)
            }
            Msg::Reply { id, sig } => {
                self.carry(id, trace);
                self.on_reply(dst, id, sig)
            }
            Msg::AuditRead { chain, dest } => self.on_audit_read(src, dst, chain, dest, trace),
            Msg::AuditReply { chain, dest, entries, read_at_ms } => {
                self.on_audit_reply(dst, chain, dest, entries, read_at_ms, trace)
            }
            Msg::Alarm { alarm } => {
                self.arrived(&trace);
                self.alarms[alarm].delivered.push((dst.to_string(), self.now));
                if dst.as_str() == CC && self.alarms[alarm].cause == AlarmCause::AuditMismatch {
                    let subject = id(&self.alarms[alarm].subject);
                    for dest in [Destination::ControlCenter, Destination::Utility] {
                        if let Some(list) = self.pending_both.get(&(subject.clone(), dest)) {
                            for &(a, _) in list {
                                if self.detections[a].detected {
                                    self.detections[a].alarms_to_cc += 1;
                                }
                            }
                        }
                    }
                }
                "delivered"
            }
        }
    }

    fn on_device_store(
        &mut self,
        miner_id: &PartyId,
        chain: DeviceId,
        dest: Destination,
        tx_type: TxType,
        ct: Ciphertext,
        trace: Trace,
    ) -> &'static str {
        let now = self.now;
        let key_class = self.chains.get(&(chain.clone(), dest)).map(|c| c.key_class);
        let Some(m) = self.miner_mut(miner_id) else { return "no_miner" };
        let actual = m.keys.get(ct.key_id).map(|k| k.data_class()).ok();
        let role = m.role;
        let next = m.parent.clone();
        let result = m.process_store(&chain, dest, tx_type, &ct, now);
        if let (Some(want), Some(got)) = (key_class, actual) {
            self.check("key_class");
            if want != got {
                self.violation("key_class", format!("{chain}: {got:?} key on a {want:?} chain"));
            }
        }
        match result {
            Ok(fwd) => {
                self.authorized();
                if let Some(c) = self.chains.get_mut(&(chain.clone(), dest)) {
                    c.in_flight += 1;
                }
                let msg = Msg::Envelope(Box::new(fwd.envelope));
                if role == Role::Hgw {
                    let ngw = next.expect("HGW has an NGW");
                    self.forward(miner_id, &ngw, Link::Nan, RELAY, msg, trace);
                } else {
                    let storage = Self::storage_for(dest);
                    self.forward(miner_id, &storage, Link::Wired, STORAGE_SEALED, msg, trace);
                }
                "forwarded"
            }
            Err(d) => self.refuse(miner_id, trace.class, &d, &chain, tx_type),
        }
    }

    fn on_relay(&mut self, src: &PartyId, ngw: &PartyId, env: StoreEnvelope, trace: Trace) -> &'static str {
        let now = self.now;
        let Some(m) = self.gateways.get_mut(ngw) else { return "no_miner" };
        match m.relay_store(src, &env, now) {
            Ok(_auth) => {
                self.authorized();
                let storage = Self::storage_for(env.destination);
                let stages = if env.inner.payload_cipher.first() == Some(&1) { STORAGE_SEALED } else { STORAGE_PUBLIC };
                self.forward(ngw, &storage, Link::Wired, stages, Msg::Envelope(Box::new(env)), trace);
                "relayed"
            }
            Err(d) => {
                let (chain, tx_type) = (env.inner.device_id.clone(), env.inner.tx_type);
                self.chain_done(&chain, env.destination);
                self.refuse(ngw, trace.class, &d, &chain, tx_type)
            }
        }
    }

    fn on_storage_envelope(&mut self, src: &PartyId, st: &PartyId, env: StoreEnvelope, trace: Trace) -> &'static str {
        let now = self.now;
        let chain = env.inner.device_id.clone();
        let dest = env.destination;
        let key = (chain.clone(), dest);
        let m = self.miner_mut(st).expect("storage exists");
        let result = m.authenticate_store_at_rbc(src, &env, now);
        self.chain_done(&chain, dest);
        match result {
            Ok(acc) => {
                self.authorized();
                self.arrived(&trace);
                self.check("sync");
                if acc.head.block_number != env.auth_block_number || acc.head.tx_digest != env.auth_tx_digest {
                    self.violation("sync", format!("{chain}: remote head differs from the envelope's local head"));
                }
                let info = self.chains.get(&key).map(|i| (i.in_flight, i.holder.clone(), i.meter));
                if let Some((in_flight, holder, meter)) = info {
                    if in_flight == 0 && !self.tampered.contains(&key) {
                        let lbc = self.miner(&holder).and_then(|h| h.ledger(&chain, dest)).and_then(|l| l.last_transaction_ref(&chain).ok());
                        if lbc != Some(acc.head) {
                            self.violation("sync", format!("{chain}: local and remote heads differ at quiescence"));
                        }
                    }
                    if let Some(mi) = meter {
                        let c = &mut self.meters[mi].counts;
                        match trace.class {
                            Class::HfStore => c.hf_forwarded += 1,
                            Class::LfStore => c.lf_forwarded += 1,
                            Class::Ebt => c.ebt_forwarded += 1,
                            _ => {}
                        }
                    }
                }
                "accepted"
            }
            Err(Dropped::Mismatch) => {
                self.refused(trace.class, "mismatch", false);
                match self.pending_rbc.remove(&key) {
                    Some(attacks) => {
                        for a in attacks {
                            let d = &mut self.detections[a];
                            d.detected = true;
                            d.mechanism = Some(Mechanism::StoreAuthMismatch);
                            d.detect_latency_ms = Some(now - d.injected_at_ms);
                        }
                    }
                    None if !self.tampered.contains(&key) => {
                        self.violation("false_rejection", format!("{chain}: untampered chain rejected a store"));
                    }
                    None => {}
                }
                "mismatch"
            }
            Err(d) => self.refuse(st, trace.class, &d, &chain, env.inner.tx_type),
        }
    }

    fn on_broadcast(&mut self, at: &PartyId, frame: BroadcastFrame, trace: Trace) -> &'static str {
        let now = self.now;
        let origin = frame.origin.clone();
        let Some(m) = self.gateways.get_mut(at) else { return "no_miner" };
        let role = m.role;
        let auth = match m.admit(PolicySource::Own, &AuthRequest::new(&origin, TxType::Store, &origin, now)) {
            Ok(a) => a,
            Err(d) => return self.refuse(at, trace.class, &d, &origin, TxType::Store),
        };
        m.append_own(TxType::Store, Record::Broadcast(frame.clone()), None, now);
        self.authorized();
        self.arrived(&trace);
        if role == Role::Ngw {
            for hgw in self.hgws_of.get(at).cloned().unwrap_or_default() {
                let t = self.new_trace(Class::Control);
                self.forward(at, &hgw, Link::Nan, 1, Msg::Broadcast(Box::new(frame.clone())), t);
            }
            return "recorded";
        }
        // HGW: copy onto every attached meter's chain for this origin
        let (stream, dest) = if origin.as_str() == UTILITY {
            (Stream::Lf, Destination::Utility)
        } else {
            (Stream::Hf, Destination::ControlCenter)
        };
        let ngw = self.gateways[at].parent.clone().expect("HGW has an NGW");
        for mi in self.meters_of.get(at).cloned().unwrap_or_default() {
            if self.meters[mi].removed {
                continue;
            }
            let chain = self.meters[mi].sm.chain(stream).clone();
            let m = self.gateways.get_mut(at).expect("exists");
            let Ok(env) = m.record_public(&chain, dest, Record::Broadcast(frame.clone()), &auth, now) else { continue };
            if let Some(c) = self.chains.get_mut(&(chain, dest)) {
                c.in_flight += 1;
            }
            let t = self.new_trace(Class::BroadcastRecord);
            self.forward(at, &ngw, Link::Nan, RELAY, Msg::Envelope(Box::new(env)), t);
        }
        "recorded"
    }

    fn on_pair_data(&mut self, hgw: &PartyId, pair: usize, ct: Ciphertext, trace: Trace) -> &'static str {
        let now = self.now;
        let sensor = self.pairs[pair].pair.sensor_id.clone();
        let actuator = self.pairs[pair].pair.actuator_id.clone();
        let m = self.gateways.get_mut(hgw).expect("HGW exists");
        let src = PolicySource::Chain(&sensor, Destination::Local);
        match m.admit(src, &AuthRequest::new(&sensor, TxType::Access, &actuator, now)) {
            Ok(auth) => {
                let logged = StoredPayload::Sealed(ct.clone());
                if m.append_local(&sensor, Destination::Local, TxType::Access, logged, &auth, now).is_err() {
                    self.refused(trace.class, "unknown_chain", false);
                    return "unknown_chain";
                }
                self.authorized();
                self.forward(hgw, &actuator, Link::Han, 1, Msg::PairDeliver { pair, ct }, trace);
                "forwarded"
            }
            Err(d) => self.refuse(hgw, trace.class, &d, &sensor, TxType::Access),
        }
    }

    fn on_pair_deliver(&mut self, pair: usize, ct: Ciphertext, trace: Trace) -> &'static str {
        let slot = &self.pairs[pair];
        if self.offline.contains(&slot.pair.actuator_id) {
            self.refused(trace.class, "offline", true);
            return "offline";
        }
        let hgw_valid = self.gateways[&slot.hgw].keys.is_valid(ct.key_id);
        let slot = &mut self.pairs[pair];
        let own_valid = slot.actuator_keys.is_valid(ct.key_id);
        let value = slot.actuator_keys.get(ct.key_id).and_then(|k| k.decrypt(&ct)).ok().and_then(|pt| {
            match Record::from_bytes(&pt) {
                Ok(Record::Sample { value, .. }) => Some(value),
                _ => None,
            }
        });
        let Some(value) = value else {
            self.refused(trace.class, "key_invalid", false);
            return "key_invalid";
        };
        match slot.pair.sensor_report(ct.key_id, hgw_valid && own_valid, value) {
            Ok(_) => {
                self.check("revocation");
                if !(hgw_valid && own_valid) {
                    self.violation("revocation", format!("pair {pair}: accepted under an invalid key"));
                }
                self.arrived(&trace);
                "actuated"
            }
            Err(_) => {
                self.refused(trace.class, "key_invalid", false);
                "key_invalid"
            }
        }
    }

    fn on_key_control(&mut self, dst: &PartyId, ctl: &KeyControl, trace: Trace) -> &'static str {
        self.arrived(&trace);
        if let Some(m) = self.miner_mut(dst) {
            m.apply_key_control(ctl);
            return "applied";
        }
        if let Some(&i) = self.meter_index.get(dst) {
            let _ = self.meters[i].keys.invalidate(ctl.key_id);
            return "applied";
        }
        if let Some(&i) = self.pair_by_sensor.get(dst) {
            let _ = self.pairs[i].sensor_keys.invalidate(ctl.key_id);
            return "applied";
        }
        if let Some(&i) = self.pair_by_actuator.get(dst) {
            let _ = self.pairs[i].actuator_keys.invalidate(ctl.key_id);
            return "applied";
        }
        "unknown_holder"
    }

    fn on_key_grant(&mut self, dst: &PartyId, pair: usize, key: SharedKey, trace: Trace) -> &'static str {
        self.arrived(&trace);
        let slot = &mut self.pairs[pair];
        let kid = key.key_id();
        if *dst == slot.pair.sensor_id {
            if slot.sensor_keys.insert(key).is_ok() {
                slot.sensor_key = Some(kid);
            }
        } else if slot.actuator_keys.insert(key).is_ok() {
            slot.pair.pair_key = Some(kid);
        }
        "installed"
    }

    // ----- on-demand reads and control -----

    fn request_bytes(&self, r: &Request) -> Vec<u8> {
        let rec = match r.tx_type {
            TxType::Ct => Record::Ct { request_id: r.id, target: r.target.clone(), command: r.command.unwrap_or(Switch::Off) },
            _ => Record::Otft { request_id: r.id, target: r.target.clone(), register_wh: r.value },
        };
        rec.to_bytes()
    }

    fn request_record(r: &Request) -> Record {
        match r.tx_type {
            TxType::Ct => Record::Ct { request_id: r.id, target: r.target.clone(), command: r.command.unwrap_or(Switch::Off) },
            _ => Record::Otft { request_id: r.id, target: r.target.clone(), register_wh: r.value },
        }
    }

    fn hgw_of(&self, device: &DeviceId) -> Option<PartyId> {
        if let Some(&i) = self.meter_index.get(device) {
            return Some(self.meters[i].sm.hgw.clone());
        }
        self.pair_by_actuator.get(device).map(|&i| self.pairs[i].hgw.clone())
    }

    fn link_key<'a>(table: &'a KeyTable, a: &PartyId, b: &PartyId) -> Option<&'a SharedKey> {
        table.lookup(&KeySlot::new([a, b], DataClass::Generic, b)).filter(|k| k.is_valid())
    }

    /// Issues an on-the-fly read (`Otft`) or control command (`Ct`) from
    /// `requester` through the target's NGW and HGW. Returns the request id.
    pub fn issue_request(&mut self, requester: &PartyId, tx_type: TxType, target: &DeviceId, command: Option<Switch>) -> u64 {
        let rid = self.next_request;
        self.next_request += 1;
        let class = if tx_type == TxType::Ct { Class::Ct } else { Class::Otft };
        let trace = self.new_trace(class);
        let hgw = self.hgw_of(target);
        let ngw = hgw
            .as_ref()
            .and_then(|h| self.gateways[h].parent.clone())
            .unwrap_or_else(|| self.ngw_ids[0].clone());
        let r = Request {
            id: rid,
            tx_type,
            requester: requester.clone(),
            target: target.clone(),
            ngw: ngw.clone(),
            hgw,
            command,
            issued_at_ms: self.now,
            trace,
            value: None,
            outcome: None,
            latency_ms: None,
        };
        let sig = match Self::link_key(&self.cc_keys, &id(CC), &ngw) {
            Some(k) if requester.as_str() == CC => k.sign(&self.request_bytes(&r)).unwrap_or_default(),
            _ => Vec::new(),
        };
        self.requests.insert(rid, r);
        // requester signs, NGW verifies
        self.send(requester, &ngw, Link::Cellular, 2, Msg::Request { id: rid, sig }, trace);
        let timeout = self.now + self.cfg.otft_timeout_ms;
        self.queue.schedule(timeout, Ev::Timeout(rid));
        rid
    }

    /// Settles a request once; later outcomes are ignored. Returns whether
    /// this call settled it.
    fn resolve(&mut self, rid: u64, outcome: &str, latency: Option<u64>) -> bool {
        let Some(r) = self.requests.get_mut(&rid) else { return false };
        if r.outcome.is_some() {
            return false;
        }
        r.outcome = Some(outcome.to_string());
        r.latency_ms = latency;
        let class = r.trace.class;
        match outcome {
            "answered" => {}
            "denied" | "exceeded" | "unreachable" => self.refused(class, outcome, true),
            other => self.refused(class, other, false),
        }
        true
    }

    fn on_request(&mut self, at: &PartyId, rid: u64, sig: Vec<u8>) -> &'static str {
        let now = self.now;
        let Some(r) = self.requests.get(&rid) else { return "unknown_request" };
        if r.outcome.is_some() {
            return "late";
        }
        let (requester, tx_type, target) = (r.requester.clone(), r.tx_type, r.target.clone());
        let bytes = self.request_bytes(r);
        let hgw = r.hgw.clone();
        let m = self.gateways.get_mut(at).expect("gateway exists");
        let role = m.role;
        if let Err(d) = m.admit(PolicySource::Own, &AuthRequest::new(&requester, tx_type, &target, now)) {
            let reason = self.refuse_request(at, rid, &d, &target, tx_type);
            return reason;
        }
        let m = &self.gateways[at];
        let upstream = if role == Role::Ngw { id(CC) } else { m.parent.clone().expect("HGW has an NGW") };
        let ok = Self::link_key(&m.keys, &upstream, at).is_some_and(|k| k.verify(&bytes, &sig).is_ok());
        if !ok {
            self.resolve(rid, "auth_failure", None);
            return "auth_failure";
        }
        self.authorized();
        match role {
            Role::Ngw => {
                let Some(hgw) = hgw.filter(|h| self.gateways[at].children.contains(h)) else {
                    self.resolve(rid, "denied", None);
                    return "unknown_target";
                };
                let m = self.gateways.get_mut(at).expect("exists");
                m.append_own(tx_type, Self::request_record(&self.requests[&rid]), Some(sig), now);
                let m = &self.gateways[at];
                let sig = Self::link_key(&m.keys, at, &hgw).and_then(|k| k.sign(&bytes).ok()).unwrap_or_default();
                let t = self.trace_of(rid);
                self.forward(at, &hgw, Link::Nan, 1, Msg::Request { id: rid, sig }, t);
                "forwarded"
            }
            _ => {
                // the HGW reads or actuates the device on its own HAN
                if !self.gateways[at].children.contains(&target) {
                    self.resolve(rid, "denied", None);
                    return "unknown_target";
                }
                if self.offline.contains(&target) {
                    return "device_offline";
                }
                let value = match tx_type {
                    TxType::Otft => self.meter(&target).map(|sm| sm.read_now()),
                    _ => None,
                };
                if tx_type == TxType::Ct {
                    if let (Some(&i), Some(cmd)) = (self.pair_by_actuator.get(&target), self.requests[&rid].command) {
                        self.pairs[i].pair.actuator_state = cmd;
                    }
                }
                let r = self.requests.get_mut(&rid).expect("exists");
                r.value = value;
                let rec = Self::request_record(r);
                let bytes = self.request_bytes(&self.requests[&rid]);
                let m = self.gateways.get_mut(at).expect("exists");
                m.append_own(tx_type, rec, None, now);
                let sig = Self::link_key(&m.keys, &upstream, at).and_then(|k| k.sign(&bytes).ok()).unwrap_or_default();
                let t = self.trace_of(rid);
                // HGW signs, NGW verifies
                self.forward(at, &upstream, Link::Nan, 2, Msg::Reply { id: rid, sig }, t);
                "answered"
            }
        }
    }

    /// Requests keep a single trace that is advanced hop by hop.
    fn trace_of(&self, rid: u64) -> Trace {
        self.requests[&rid].trace
    }

    fn carry(&mut self, rid: u64, trace: Trace) {
        if let Some(r) = self.requests.get_mut(&rid) {
            r.trace = trace;
        }
    }

    fn refuse_request(&mut self, at: &PartyId, rid: u64, d: &Dropped, target: &DeviceId, tx_type: TxType) -> &'static str {
        let reason = match d {
            Dropped::Denied(_) => "denied",
            Dropped::Exceeded { .. } => "exceeded",
            _ => "rejected",
        };
        self.resolve(rid, reason, None);
        if let Dropped::Exceeded { count, window_start_ms, first: true } = d {
            let detail = AlarmDetail::Excess { tx_type, window_start_ms: *window_start_ms, count: *count };
            self.raise(at, AlarmCause::ExcessTraffic, target, detail);
        }
        reason
    }

    fn on_reply(&mut self, at: &PartyId, rid: u64, sig: Vec<u8>) -> &'static str {
        let now = self.now;
        let Some(r) = self.requests.get(&rid) else { return "unknown_request" };
        let bytes = self.request_bytes(r);
        let tx_type = r.tx_type;
        if at.as_str() == CC {
            let ngw = r.ngw.clone();
            let ok = Self::link_key(&self.cc_keys, &id(CC), &ngw).is_some_and(|k| k.verify(&bytes, &sig).is_ok());
            if !ok {
                self.resolve(rid, "auth_failure", None);
                return "auth_failure";
            }
            let trace = r.trace;
            let latency = now - r.issued_at_ms;
            if self.resolve(rid, "answered", Some(latency)) {
                self.arrived(&trace);
                return "answered";
            }
            return "late";
        }
        // NGW: verify the HGW's reply, log, re-sign toward the requester
        let hgw = r.hgw.clone().expect("routed request has an HGW");
        let rec = Self::request_record(r);
        let m = self.gateways.get_mut(at).expect("exists");
        if !Self::link_key(&m.keys, at, &hgw).is_some_and(|k| k.verify(&bytes, &sig).is_ok()) {
            self.resolve(rid, "auth_failure", None);
            return "auth_failure";
        }
        m.append_own(tx_type, rec, None, now);
        let m = &self.gateways[at];
        let sig = Self::link_key(&m.keys, &id(CC), at).and_then(|k| k.sign(&bytes).ok()).unwrap_or_default();
        let t = self.trace_of(rid);
        let requester = self.requests[&rid].requester.clone();
        self.forward(at, &requester, Link::Cellular, 1, Msg::Reply { id: rid, sig }, t);
        "relayed"
    }

    // ----- audits -----

    fn on_audit_read(&mut self, auditor: &PartyId, st: &PartyId, chain: DeviceId, dest: Destination, trace: Trace) -> &'static str {
        let now = self.now;
        let m = self.miner_mut(st).expect("storage exists");
        match m.serve_audit_read(auditor, &chain, dest, now) {
            Ok(entries) => {
                self.authorized();
                let msg = Msg::AuditReply { chain, dest, entries, read_at_ms: now };
                self.send(st, auditor, Link::Wired, 1, msg, trace);
                "served"
            }
            Err(d) => self.refuse(st, trace.class, &d, &chain, TxType::Access),
        }
    }

    fn on_audit_reply(
        &mut self,
        auditor: &PartyId,
        chain: DeviceId,
        dest: Destination,
        entries: Vec<AuditEntry>,
        read_at_ms: u64,
        trace: Trace,
    ) -> &'static str {
        self.arrived(&trace);
        let origin = if dest == Destination::Utility { UTILITY } else { CC };
        let genesis = self.chains.get(&(chain.clone(), dest)).and_then(|c| c.meter).map_or(0, |m| self.meters[m].genesis_ms);
        let settle = self.cfg.audit_settle_ms;
        let m = &self.gateways[auditor];
        let expected: Vec<u64> = self
            .broadcasts
            .iter()
            .filter(|b| b.origin.as_str() == origin && b.issued_at_ms >= genesis && b.issued_at_ms + settle <= read_at_ms)
            .filter(|b| m.broadcast_copies().contains_key(&b.id))
            .map(|b| b.id)
            .collect();
        match m.compare_audit(&entries, &expected) {
            AuditOutcome::AuditOk => "audit_ok",
            AuditOutcome::AuditMismatch { mismatched, malformed } => {
                let key = (chain.clone(), dest);
                if !self.tampered.contains(&key) {
                    self.violation("false_audit_alarm", format!("{chain}: mismatch {mismatched:?} on an untampered chain"));
                }
                if let Some(list) = self.pending_both.get(&key) {
                    for &(a, bid) in list {
                        let d = &mut self.detections[a];
                        if !d.detected && mismatched.contains(&bid) {
                            d.detected = true;
                            d.mechanism = Some(Mechanism::BroadcastAudit);
                            d.detect_latency_ms = Some(read_at_ms - d.injected_at_ms);
                        }
                    }
                }
                if self.audit_seen.insert((auditor.clone(), chain.clone(), mismatched.clone(), malformed)) {
                    self.raise(auditor, AlarmCause::AuditMismatch, &chain, AlarmDetail::Audit { mismatched });
                }
                "audit_mismatch"
            }
        }
    }

    // ----- scripted events -----

    fn script(&mut self, i: usize) -> String {
        let ev = self.cfg.events[i].clone();
        match ev {
            ScriptEvent::Outage { device, .. } | ScriptEvent::Restore { device, .. } => {
                let Some(&mi) = self.meter_index.get(&device) else { return "unknown_device".into() };
                if self.meters[mi].removed || self.offline.contains(&device) {
                    return "device_unavailable".into();
                }
                let event = if matches!(self.cfg.events[i], ScriptEvent::Outage { .. }) {
                    GridEvent::PowerOutage
                } else {
                    GridEvent::PowerRestored
                };
                self.meter_emit(mi, Stream::Hf, TxType::Ebt, Record::Event { at_ms: self.now, event }, Class::Ebt);
                "ebt".into()
            }
            ScriptEvent::Otft { target, requester, .. } => {
                let r = self.issue_request(&requester, TxType::Otft, &target, None);
                format!("request {r}")
            }
            ScriptEvent::Ct { target, requester, command, .. } => {
                let r = self.issue_request(&requester, TxType::Ct, &target, Some(command));
                format!("request {r}")
            }
            ScriptEvent::Broadcast { origin, body, .. } => {
                let kind = if origin.as_str() == UTILITY { BroadcastKind::Pricing } else { BroadcastKind::Drms };
                let b = self.broadcast(&origin, kind, body.into_bytes());
                format!("broadcast {b}")
            }
            ScriptEvent::RevokePair { sensor, .. } => {
                let Some(&p) = self.pair_by_sensor.get(&sensor) else { return "unknown_device".into() };
                if self.revoke_pair(p) { "revoked".into() } else { "no_valid_key".into() }
            }
            ScriptEvent::RekeyPair { sensor, .. } => {
                let Some(&p) = self.pair_by_sensor.get(&sensor) else { return "unknown_device".into() };
                self.revoke_pair(p);
                self.rekey_pair(p)
            }
            ScriptEvent::Offline { device, .. } => {
                self.offline.insert(device);
                "offline".into()
            }
            ScriptEvent::Online { device, .. } => {
                self.offline.remove(&device);
                "online".into()
            }
            ScriptEvent::Remove { device, .. } => self.remove_meter(&device),
        }
    }

    fn revoke_pair(&mut self, p: usize) -> bool {
        let hgw = self.pairs[p].hgw.clone();
        let Some(k) = self.pairs[p].pair.pair_key else { return false };
        let m = self.gateways.get_mut(&hgw).expect("exists");
        let Ok(controls) = invalidate_key(&mut m.keys, k, &hgw) else { return false };
        for ctl in controls {
            let to = ctl.to.clone();
            let t = self.new_trace(Class::Control);
            self.send(&hgw, &to, Link::Han, 0, Msg::KeyControl(ctl), t);
        }
        true
    }

    fn rekey_pair(&mut self, p: usize) -> String {
        let now = self.now;
        let hgw = self.pairs[p].hgw.clone();
        let (sensor, actuator) = (self.pairs[p].pair.sensor_id.clone(), self.pairs[p].pair.actuator_id.clone());
        let m = self.gateways.get_mut(&hgw).expect("exists");
        let Some(policy) = m.ledger(&sensor, Destination::Local).and_then(|l| l.current_policy().ok()).cloned() else {
            return "unknown_chain".into();
        };
        match self.kex.allocate_pair_key(&mut m.keys, &policy, now, &sensor, &actuator) {
            Ok(key) => {
                let kid = key.key_id();
                for to in [sensor, actuator] {
                    let t = self.new_trace(Class::Control);
                    self.send(&hgw, &to, Link::Han, 1, Msg::KeyGrant { pair: p, key: Box::new(key.clone()) }, t);
                }
                format!("rekeyed {kid}")
            }
            Err(e) => format!("rekey failed: {e}"),
        }
    }

    fn remove_meter(&mut self, device: &DeviceId) -> String {
        let now = self.now;
        let Some(&mi) = self.meter_index.get(device) else { return "unknown_device".into() };
        let hgw = self.meters[mi].sm.hgw.clone();
        let m = self.gateways.get_mut(&hgw).expect("exists");
        let removal = match m.remove_device(device, now) {
            Ok(r) => r,
            Err(e) => return e.to_string(),
        };
        let ngw = m.parent.clone().expect("HGW has an NGW");
        self.meters[mi].removed = true;
        for ctl in removal.controls {
            let to = ctl.to.clone();
            let link = if to.as_str() == CC_STORAGE || to.as_str() == U_STORAGE { Link::Wired } else { Link::Han };
            let t = self.new_trace(Class::Control);
            self.send(&hgw, &to, link, 1, Msg::KeyControl(ctl), t);
        }
        for env in removal.envelopes {
            if let Some(c) = self.chains.get_mut(&(env.inner.device_id.clone(), env.destination)) {
                c.in_flight += 1;
            }
            let t = self.new_trace(Class::Remove);
            self.forward(&hgw, &ngw, Link::Nan, RELAY, Msg::Envelope(Box::new(env)), t);
        }
        "removed".into()
    }

    // ----- attacks -----

    fn meter_chain(&self, device: &DeviceId, stream: Stream) -> Option<(DeviceId, Destination)> {
        if let Some(&i) = self.meter_index.get(device) {
            let dest = if stream == Stream::Hf { Destination::ControlCenter } else { Destination::Utility };
            return Some((self.meters[i].sm.chain(stream).clone(), dest));
        }
        self.chains.contains_key(&(device.clone(), Destination::ControlCenter)).then(|| (device.clone(), Destination::ControlCenter))
    }

    fn inject(&mut self, a: usize) -> String {
        let spec = self.cfg.attacks[a].clone();
        let now = self.now;
        match spec {
            AttackSpec::Ddos { device, start_ms, duration_ms, .. } => {
                let watch = match self.meter_index.get(&device) {
                    Some(&i) => {
                        self.meters[i].flood = Some((start_ms, start_ms + duration_ms));
                        self.meters[i].sm.hf_chain.clone()
                    }
                    None => device.clone(),
                };
                self.ddos_watch.insert(watch, a);
                self.queue.schedule(now, Ev::Tick(Entity::Flood(a), 0));
                "flood started".into()
            }
            AttackSpec::TamperRbc { device, stream, selector, tx_number, mutation, .. } => {
                let Some(key) = self.meter_chain(&device, stream) else { return "unknown target".into() };
                let storage = Self::storage_for(key.1);
                let rng = &mut self.rng;
                let rbc = match storage.as_str() {
                    U_STORAGE => self.u_storage.ledger_mut(&key.0, key.1),
                    _ => self.cc_storage.ledger_mut(&key.0, key.1),
                };
                let Some(rbc) = rbc else { return "unknown chain".into() };
                match attack::tamper_rbc(rbc, selector, tx_number, mutation, rng) {
                    Ok(n) => {
                        self.tampered.insert(key.clone());
                        self.pending_rbc.entry(key).or_default().push(a);
                        format!("tampered tx {n}")
                    }
                    Err(e) => {
                        self.detections[a].note = Some(e.to_string());
                        e.to_string()
                    }
                }
            }
            AttackSpec::TamperBoth { device, stream, broadcast, .. } => {
                let Some(key) = self.meter_chain(&device, stream) else { return "unknown target".into() };
                let holder = self.chains[&key].holder.clone();
                let storage = Self::storage_for(key.1);
                let rbc = match storage.as_str() {
                    U_STORAGE => self.u_storage.ledger_mut(&key.0, key.1),
                    _ => self.cc_storage.ledger_mut(&key.0, key.1),
                };
                let lbc = self.gateways.get_mut(&holder).and_then(|h| h.ledger_mut(&key.0, key.1));
                let (Some(lbc), Some(rbc)) = (lbc, rbc) else { return "unknown chain".into() };
                match attack::tamper_both(lbc, rbc, broadcast) {
                    Ok(bid) => {
                        self.tampered.insert(key.clone());
                        self.pending_both.entry(key).or_default().push((a, bid));
                        format!("tampered broadcast {bid}")
                    }
                    Err(e) => {
                        self.detections[a].note = Some(e.to_string());
                        e.to_string()
                    }
                }
            }
            AttackSpec::LinkingProbe { .. } => {
                self.probe(Some(a));
                "probed".into()
            }
        }
    }

    /// Metadata-only linking attempt over everything the two storage miners hold.
    fn probe(&mut self, attack: Option<usize>) {
        let views = |m: &MinerState, dest: Destination| -> Vec<LedgerView> {
            m.ledgers().filter(|((_, d), _)| *d == dest).map(|(_, l)| LedgerView::of(&m.id, l)).collect()
        };
        let cc_side = views(&self.cc_storage, Destination::ControlCenter);
        let u_side = views(&self.u_storage, Destination::Utility);
        let report = attack::linking_probe(&cc_side, &u_side);
        if let Some(a) = attack {
            let meters = self.meters.len();
            self.detections[a].note = Some(format!("{} of {meters} meter chain pairs linked", report.pairs_linked));
        }
        self.linking = Some(report);
    }

    // ----- end of run -----

    fn finish(&mut self) {
        for a in 0..self.cfg.attacks.len() {
            if matches!(self.cfg.attacks[a], AttackSpec::LinkingProbe { start_ms: None }) {
                self.probe(Some(a));
            }
        }
        for (key, list) in &self.pending_rbc {
            for &a in list {
                self.detections[a].note.get_or_insert_with(|| format!("no later store from {} reached storage", key.0));
            }
        }
        for list in self.pending_both.values() {
            for &(a, _) in list {
                if !self.detections[a].detected {
                    self.detections[a].note.get_or_insert_with(|| "no audit read after injection".into());
                }
            }
        }
        for d in &mut self.detections {
            if d.kind == "ddos" && !d.detected {
                d.note.get_or_insert_with(|| "rate never exceeded the limit".into());
            }
        }

        self.final_checks();
    }

    fn final_checks(&mut self) {
        // chain soundness
        let mut summary = ChainSummary::default();
        let mut broken_untampered = Vec::new();
        for m in self.miners() {
            for ((owner, dest), l) in m.ledgers() {
                summary.ledgers += 1;
                let tampered = l.was_tampered();
                summary.tampered += tampered as u64;
                match l.validate_chain() {
                    Ok(()) => summary.valid += 1,
                    Err(b) => {
                        if !tampered {
                            broken_untampered.push(format!("{}:{owner}", m.id));
                        }
                        summary.broken.push(BrokenChain {
                            holder: m.id.to_string(),
                            owner: owner.to_string(),
                            destination: format!("{dest:?}"),
                            block_number: b.block_number,
                            reason: format!("{:?}", b.reason),
                            tampered,
                        });
                    }
                }
            }
            for l in m.retired() {
                summary.ledgers += 1;
                if l.validate_chain().is_ok() {
                    summary.valid += 1;
                }
            }
        }
        *self.checks.entry("chain_validation".into()).or_default() += summary.ledgers;
        for b in broken_untampered {
            self.violation("chain_soundness", format!("{b} fails validation"));
        }
        self.chain_summary = Some(summary);

        // dual copies: local and remote chains hold the same history
        let mut dual = Vec::new();
        for ((chain, dest), info) in &self.chains {
            if self.tampered.contains(&(chain.clone(), *dest)) {
                continue;
            }
            let lbc = self.miner(&info.holder).and_then(|m| m.ledger(chain, *dest));
            let rbc = self.miner(&info.storage).and_then(|m| m.ledger(chain, *dest));
            let same = match (lbc, rbc) {
                (Some(a), Some(b)) => {
                    a.tx_count() == b.tx_count() && a.last_transaction_ref(chain).ok() == b.last_transaction_ref(chain).ok()
                }
                _ => false,
            };
            dual.push((chain.clone(), same, info.in_flight));
        }
        for (chain, same, in_flight) in dual {
            self.check("dual_copy");
            if !same || in_flight != 0 {
                self.violation("dual_copy", format!("{chain}: local and remote copies differ"));
            }
        }

        // every broadcast record held anywhere untampered matches the original
        let canonical: HashMap<u64, crate::ledger::Digest> = self
            .broadcasts
            .iter()
            .map(|b| (b.id, self.hasher.digest(&StoredPayload::Public(Record::Broadcast(b.clone())).to_bytes())))
            .collect();
        let mut bad = Vec::new();
        let mut seen = 0u64;
        for m in self.miners() {
            for ((owner, dest), l) in m.ledgers() {
                if self.tampered.contains(&(owner.clone(), *dest)) {
                    continue;
                }
                for (_, tx) in l.transactions() {
                    if tx.payload_cipher.first() != Some(&2) || tx.payload_cipher.get(1) != Some(&4) {
                        continue;
                    }
                    seen += 1;
                    let ok = match StoredPayload::from_bytes(&tx.payload_cipher) {
                        Ok(StoredPayload::Public(Record::Broadcast(b))) => {
                            canonical.get(&b.id) == Some(&self.hasher.digest(&tx.payload_cipher))
                        }
                        _ => false,
                    };
                    if !ok {
                        bad.push(format!("{}:{owner} tx {}", m.id, tx.tx_number));
                    }
                }
            }
        }
        *self.checks.entry("broadcast_consistency".into()).or_default() += seen;
        for b in bad {
            self.violation("broadcast_consistency", b);
        }

        // count reconciliation per class
        let unbalanced: Vec<String> = self
            .stats
            .iter()
            .filter(|(_, s)| !s.reconciles())
            .map(|(c, s)| format!("{}: {} != {} + {} + {}", c.name(), s.generated, s.forwarded, s.dropped, s.rejected))
            .collect();
        *self.checks.entry("reconciliation".into()).or_default() += self.stats.len() as u64;
        for u in unbalanced {
            self.violation("reconciliation", u);
        }

        self.check("authorized_forwarding");
        if self.forwards > self.authorizations {
            self.violation(
                "authorized_forwarding",
                format!("{} miner forwards against {} authorizations", self.forwards, self.authorizations),
            );
        }
    }

    /// Digest over every decrypted non-genesis payload each storage miner
    /// holds. Independent of key scheme and timing.
    fn storage_payload_digests(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for st in [&self.cc_storage, &self.u_storage] {
            let mut buf = Vec::new();
            for ((owner, dest), l) in st.ledgers() {
                if *dest == Destination::Local {
                    continue;
                }
                for (_, tx) in l.transactions().filter(|(_, tx)| tx.tx_type != TxType::Genesis) {
                    let body = match StoredPayload::from_bytes(&tx.payload_cipher) {
                        Ok(StoredPayload::Sealed(ct)) => {
                            st.keys.get(ct.key_id).and_then(|k| k.decrypt(&ct)).unwrap_or_else(|_| b"<sealed>".to_vec())
                        }
                        Ok(StoredPayload::Public(r)) => r.to_bytes(),
                        Err(_) => tx.payload_cipher.clone(),
                    };
                    buf.extend_from_slice(owner.as_str().as_bytes());
                    buf.push(0);
                    buf.extend_from_slice(&tx.tx_number.to_le_bytes());
                    buf.push(tx.tx_type.code());
                    buf.extend_from_slice(&(body.len() as u64).to_le_bytes());
                    buf.extend_from_slice(&body);
                }
            }
            out.insert(st.id.to_string(), sha256(&buf).to_hex());
        }
        out
    }

    pub fn report(&self) -> MetricsReport {
        let t = &self.cfg.topology;
        let mut classes = BTreeMap::new();
        for (c, s) in &self.stats {
            classes.insert(c.name().to_string(), s.report());
        }
        let requests = self
            .requests
            .values()
            .map(|r| RequestReport {
                id: r.id,
                tx_type: r.tx_type,
                requester: r.requester.to_string(),
                target: r.target.to_string(),
                issued_at_ms: r.issued_at_ms,
                outcome: r.outcome.clone().unwrap_or_else(|| "pending".into()),
                latency_ms: r.latency_ms,
                register_wh: r.value,
                command: r.command,
            })
            .collect();
        MetricsReport {
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            horizon_ms: self.cfg.horizon_ms,
            key_scheme: self.cfg.key_scheme,
            per_class_keys: self.cfg.per_class_keys,
            crypto_overhead_ms: self.overhead,
            topology: TopologySummary {
                ngws: t.ngws,
                hgws: t.ngws * t.hgws_per_ngw,
                meters: t.meter_count(),
                devices: t.device_count(),
            },
            classes,
            drops: self.drops.clone(),
            alarms: self.alarms.clone(),
            detections: self.detections.clone(),
            chains: self.chain_summary.clone().unwrap_or_default(),
            meters: self.meters.iter().map(|m| (m.sm.device_id.to_string(), m.counts.clone())).collect(),
            requests,
            actuators: self.pairs.iter().map(|p| (p.pair.actuator_id.to_string(), p.pair.actuator_state)).collect(),
            linking: self.linking.clone(),
            storage_payload_digests: self.storage_payload_digests(),
            checks: self.checks.clone(),
            violations: self.violations.clone(),
            event_log: LogSummary { events: self.log.len(), digest: self.log.digest().to_hex() },
        }
    }

    /// Consumes the world after a run and hands back the kept log.
    pub fn take_log(&mut self) -> Option<Vec<u8>> {
        self.log.bytes().map(<[u8]>::to_vec)
    }
}

/// Runs a scenario to completion.
pub fn run(cfg: &ScenarioConfig, keep_log: bool) -> RunOutput {
    let mut world = World::new(cfg, keep_log);
    world.run_to_end();
    let report = world.report();
    let log = world.take_log();
    RunOutput { report, log, world }
}

fn pseudonym(rng: &mut ChaCha20Rng) -> DeviceId {
    use rand::Rng;
    DeviceId::new(format!("pk-{:016x}", rng.gen::<u64>())).expect("non-empty")
}
