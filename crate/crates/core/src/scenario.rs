//! Scenario files in, reports out.
//!
//! Scenarios are TOML; every field has a default so a file only states
//! what differs from the reference deployment. Reports are JSON with
//! sorted keys.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackSpec;
use crate::device::{Switch, HOUR_MS, WEEK_MS};
use crate::ledger::{Action, DeviceId, DeviceMatch, LimitDuration, PartyId, PolicyRule, TxType, DEFAULT_BLOCK_CAPACITY};
use crate::metrics::MetricsReport;
use crate::miner::{KeyScheme, CC, CC_STORAGE, UTILITY, U_STORAGE};
use crate::simnet::topology::{self, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limit {
    pub count: u32,
    pub per: LimitDuration,
}

const fn limit(count: u32, per: LimitDuration) -> Limit {
    Limit { count, per }
}

/// Rate limits installed on every chain and miner at setup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub hf_store: Limit,
    pub lf_store: Limit,
    pub ebt: Limit,
    pub ct: Limit,
    pub otft: Limit,
    /// Sensor to actuator access.
    pub access: Limit,
    pub rtu_store: Limit,
    /// Per relayed device chain at NGWs and storage miners.
    pub relay: Limit,
    /// An HGW's own outbound traffic at its NGW.
    pub miner_outbound: Limit,
    /// Per broadcast origin at each gateway.
    pub broadcast: Limit,
    /// Per audited chain at storage miners.
    pub audit_read: Limit,
    pub remove: Limit,
}

impl Default for Limits {
    fn default() -> Self {
        use LimitDuration::*;
        Limits {
            hf_store: limit(4, Hourly),
            lf_store: limit(1, Weekly),
            ebt: limit(4, Hourly),
            ct: limit(4, Daily),
            otft: limit(4, Hourly),
            access: limit(4, Hourly),
            rtu_store: limit(4, Hourly),
            relay: limit(12, Hourly),
            miner_outbound: limit(10, Hourly),
            broadcast: limit(24, Daily),
            audit_read: limit(8, Hourly),
            remove: limit(4, Daily),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Periods {
    pub hf_ms: u64,
    pub lf_ms: u64,
    pub sensor_ms: u64,
    pub rtu_ms: u64,
}

impl Default for Periods {
    fn default() -> Self {
        Periods { hf_ms: 15 * 60_000, lf_ms: WEEK_MS, sensor_ms: 30 * 60_000, rtu_ms: 15 * 60_000 }
    }
}

/// Periodic broadcasts; a period of 0 disables the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Broadcasts {
    /// Utility pricing signal, recorded on every meter's utility chain.
    pub pricing_period_ms: u64,
    /// Control-center demand-response signal, recorded on every meter's
    /// control-center chain.
    pub drms_period_ms: u64,
    pub offset_ms: u64,
}

impl Default for Broadcasts {
    fn default() -> Self {
        Broadcasts { pricing_period_ms: 6 * HOUR_MS, drms_period_ms: 12 * HOUR_MS, offset_ms: 30 * 60_000 }
    }
}

fn star() -> DeviceMatch {
    DeviceMatch::Any
}

fn allow() -> Action {
    Action::Allow
}

fn hourly() -> LimitDuration {
    LimitDuration::Hourly
}

fn one() -> u32 {
    1
}

/// Extra rule upserted into a miner's own policy header after setup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySeed {
    /// Miner whose own chain receives the rule.
    pub scope: PartyId,
    pub requester: PartyId,
    pub request_type: TxType,
    #[serde(default = "star")]
    pub device_id: DeviceMatch,
    #[serde(default = "allow")]
    pub action: Action,
    #[serde(default = "one")]
    pub tx_limit: u32,
    #[serde(default = "hourly")]
    pub limit_duration: LimitDuration,
}

impl PolicySeed {
    pub fn rule(&self) -> PolicyRule {
        PolicyRule {
            requester: self.requester.clone(),
            request_type: self.request_type,
            device_id: self.device_id.clone(),
            action: self.action,
            tx_limit: self.tx_limit,
            limit_duration: self.limit_duration,
        }
    }
}

fn cc() -> PartyId {
    DeviceId::new(CC).expect("static id")
}

/// Scripted occurrences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptEvent {
    /// The meter reports a power outage (EBT).
    Outage { device: DeviceId, at_ms: u64 },
    /// The meter reports restoration (EBT).
    Restore { device: DeviceId, at_ms: u64 },
    Otft {
        target: DeviceId,
        at_ms: u64,
        #[serde(default = "cc")]
        requester: PartyId,
    },
    Ct {
        target: DeviceId,
        at_ms: u64,
        command: Switch,
        #[serde(default = "cc")]
        requester: PartyId,
    },
    /// One-off broadcast from `cc` or `utility`.
    Broadcast {
        origin: PartyId,
        at_ms: u64,
        #[serde(default)]
        body: String,
    },
    /// The HGW invalidates a sensor/actuator pair key.
    RevokePair { sensor: DeviceId, at_ms: u64 },
    /// The HGW issues a fresh pair key.
    RekeyPair { sensor: DeviceId, at_ms: u64 },
    Offline { device: DeviceId, at_ms: u64 },
    Online { device: DeviceId, at_ms: u64 },
    Remove { device: DeviceId, at_ms: u64 },
}

impl ScriptEvent {
    pub fn at_ms(&self) -> u64 {
        match self {
            ScriptEvent::Outage { at_ms, .. }
            | ScriptEvent::Restore { at_ms, .. }
            | ScriptEvent::Otft { at_ms, .. }
            | ScriptEvent::Ct { at_ms, .. }
            | ScriptEvent::Broadcast { at_ms, .. }
            | ScriptEvent::RevokePair { at_ms, .. }
            | ScriptEvent::RekeyPair { at_ms, .. }
            | ScriptEvent::Offline { at_ms, .. }
            | ScriptEvent::Online { at_ms, .. }
            | ScriptEvent::Remove { at_ms, .. } => *at_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub horizon_ms: u64,
    pub key_scheme: KeyScheme,
    /// Separate pseudonymous chains and keys per data class. Off only in
    /// the linking negative control.
    pub per_class_keys: bool,
    pub block_capacity: usize,
    /// 0 disables audits.
    pub audit_period_ms: u64,
    pub auditors_per_target: usize,
    /// Broadcasts younger than this at read time are not yet expected.
    pub audit_settle_ms: u64,
    pub otft_timeout_ms: u64,
    pub topology: Topology,
    pub periods: Periods,
    pub limits: Limits,
    pub broadcasts: Broadcasts,
    pub policies: Vec<PolicySeed>,
    pub events: Vec<ScriptEvent>,
    pub attacks: Vec<AttackSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "default".into(),
            seed: 1,
            horizon_ms: WEEK_MS,
            key_scheme: KeyScheme::B,
            per_class_keys: true,
            block_capacity: DEFAULT_BLOCK_CAPACITY,
            audit_period_ms: HOUR_MS,
            auditors_per_target: 2,
            audit_settle_ms: 60_000,
            otft_timeout_ms: 5_000,
            topology: Topology::default(),
            periods: Periods::default(),
            limits: Limits::default(),
            broadcasts: Broadcasts::default(),
            policies: Vec::new(),
            events: Vec::new(),
            attacks: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(ValidationErrors),
}

/// Every violation found, in field order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationErrors(pub Vec<String>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} validation error(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

/// Devices and miners the topology creates, by kind.
#[derive(Debug, Default)]
pub struct KnownIds {
    pub meters: BTreeSet<DeviceId>,
    pub hgws: BTreeSet<DeviceId>,
    pub ngws: BTreeSet<DeviceId>,
    pub sensors: BTreeSet<DeviceId>,
    pub actuators: BTreeSet<DeviceId>,
    pub rtus: BTreeSet<DeviceId>,
}

impl KnownIds {
    pub fn of(t: &Topology) -> Self {
        let mut k = KnownIds::default();
        for n in 1..=t.ngws {
            k.ngws.insert(topology::ngw_id(n));
            for r in 1..=t.rtus_per_ngw {
                k.rtus.insert(topology::rtu_id(n, r));
            }
            for h in 1..=t.hgws_per_ngw {
                k.hgws.insert(topology::hgw_id(n, h));
                for m in 1..=t.meters_per_hgw {
                    k.meters.insert(topology::meter_id(n, h, m));
                }
                for p in 1..=t.han_pairs_per_hgw {
                    k.sensors.insert(topology::sensor_id(n, h, p));
                    k.actuators.insert(topology::actuator_id(n, h, p));
                }
            }
        }
        k
    }

    fn miner(&self, id: &DeviceId) -> bool {
        self.hgws.contains(id) || self.ngws.contains(id) || [CC_STORAGE, U_STORAGE].contains(&id.as_str())
    }
}

fn per_window(period_ms: u64, window_ms: u64) -> u64 {
    if period_ms == 0 {
        0
    } else {
        window_ms.div_ceil(period_ms)
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ValidationErrors> {
        let mut errs = Vec::new();
        let t = &self.topology;
        if self.horizon_ms == 0 {
            errs.push("horizon_ms must be > 0".to_string());
        }
        if t.ngws == 0 || t.hgws_per_ngw == 0 {
            errs.push("topology needs at least one NGW and one HGW per NGW".into());
        }
        for (name, v) in [
            ("han_hop_ms", t.latency.han_hop_ms),
            ("nan_hop_ms", t.latency.nan_hop_ms),
            ("cellular_hop_ms", t.latency.cellular_hop_ms),
            ("wired_hop_ms", t.latency.wired_hop_ms),
            ("crypto_overhead_ms", t.crypto_overhead_ms),
        ] {
            if v < 0 {
                errs.push(format!("topology latency {name} is negative ({v})"));
            }
        }
        if self.block_capacity == 0 {
            errs.push("block_capacity must be >= 1".into());
        }
        let p = &self.periods;
        for (name, v) in [("hf_ms", p.hf_ms), ("lf_ms", p.lf_ms), ("sensor_ms", p.sensor_ms), ("rtu_ms", p.rtu_ms)] {
            if v == 0 {
                errs.push(format!("periods.{name} must be > 0"));
            }
        }
        if self.otft_timeout_ms == 0 {
            errs.push("otft_timeout_ms must be > 0".into());
        }
        let l = &self.limits;
        for (name, lim) in [
            ("hf_store", l.hf_store),
            ("lf_store", l.lf_store),
            ("ebt", l.ebt),
            ("ct", l.ct),
            ("otft", l.otft),
            ("access", l.access),
            ("rtu_store", l.rtu_store),
            ("relay", l.relay),
            ("miner_outbound", l.miner_outbound),
            ("broadcast", l.broadcast),
            ("audit_read", l.audit_read),
            ("remove", l.remove),
        ] {
            if lim.count == 0 {
                errs.push(format!("limits.{name}.count must be >= 1"));
            }
        }
        // relayed traffic per chain must fit under the relay limit, or
        // honest stores would be dropped upstream of storage
        let w = l.relay.per.window_ms();
        let b = &self.broadcasts;
        let hf = per_window(p.hf_ms, w).min(l.hf_store.count as u64 * w.div_ceil(l.hf_store.per.window_ms()));
        let hf_load = hf + per_window(b.drms_period_ms, w);
        let lf_load = per_window(p.lf_ms, w) + per_window(b.pricing_period_ms, w);
        let cap = l.relay.count as u64;
        if hf_load > cap || lf_load > cap {
            errs.push(format!(
                "limits.relay ({cap} per window) is below the per-chain load (hf {hf_load}, lf {lf_load})"
            ));
        }
        let bw = l.broadcast.per.window_ms();
        for (name, period) in [("pricing_period_ms", b.pricing_period_ms), ("drms_period_ms", b.drms_period_ms)] {
            if per_window(period, bw) > l.broadcast.count as u64 {
                errs.push(format!("broadcasts.{name} exceeds limits.broadcast"));
            }
        }
        if self.audit_period_ms > 0 {
            let aw = l.audit_read.per.window_ms();
            let reads = per_window(self.audit_period_ms, aw) * self.auditors_per_target as u64;
            if reads > l.audit_read.count as u64 {
                errs.push(format!("limits.audit_read ({}) is below the audit load ({reads})", l.audit_read.count));
            }
        }

        let ids = KnownIds::of(t);
        let origin_ok = |o: &PartyId| o.as_str() == CC || o.as_str() == UTILITY;
        for (i, s) in self.policies.iter().enumerate() {
            if !ids.miner(&s.scope) {
                errs.push(format!("policies[{i}]: unknown miner {}", s.scope));
            }
            if s.rule().validate().is_err() {
                errs.push(format!("policies[{i}]: allow rule needs tx_limit >= 1"));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            let (ok, what) = match e {
                ScriptEvent::Outage { device, .. } | ScriptEvent::Restore { device, .. } => {
                    (ids.meters.contains(device), device.to_string())
                }
                ScriptEvent::Otft { target, .. } => (ids.meters.contains(target), target.to_string()),
                ScriptEvent::Ct { target, .. } => {
                    (ids.meters.contains(target) || ids.actuators.contains(target), target.to_string())
                }
                ScriptEvent::Broadcast { origin, .. } => (origin_ok(origin), origin.to_string()),
                ScriptEvent::RevokePair { sensor, .. } | ScriptEvent::RekeyPair { sensor, .. } => {
                    (ids.sensors.contains(sensor), sensor.to_string())
                }
                ScriptEvent::Offline { device, .. } | ScriptEvent::Online { device, .. } => {
                    (ids.meters.contains(device) || ids.actuators.contains(device), device.to_string())
                }
                ScriptEvent::Remove { device, .. } => (ids.meters.contains(device), device.to_string()),
            };
            if !ok {
                errs.push(format!("events[{i}]: unknown or unsupported target {what}"));
            }
        }
        for (i, a) in self.attacks.iter().enumerate() {
            match a {
                AttackSpec::Ddos { device, rate_per_hour, .. } => {
                    if !(ids.meters.contains(device) || ids.hgws.contains(device)) {
                        errs.push(format!("attacks[{i}]: ddos target {device} is not a meter or HGW"));
                    }
                    if *rate_per_hour == 0 || *rate_per_hour as u64 > HOUR_MS {
                        errs.push(format!("attacks[{i}]: rate_per_hour must be in 1..=3600000"));
                    }
                }
                AttackSpec::TamperRbc { device, .. } => {
                    if !(ids.meters.contains(device) || ids.rtus.contains(device)) {
                        errs.push(format!("attacks[{i}]: tamper target {device} is not a meter or RTU"));
                    }
                }
                AttackSpec::TamperBoth { device, .. } => {
                    if !ids.meters.contains(device) {
                        errs.push(format!("attacks[{i}]: tamper target {device} is not a meter"));
                    }
                }
                AttackSpec::LinkingProbe { .. } => {}
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(errs))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate().map_err(ScenarioError::Invalid)?;
        Ok(cfg)
    }
}

/// Reads, parses and validates a scenario file. An unnamed scenario takes
/// the file stem as its name.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    let mut cfg = ScenarioConfig::from_toml(&text)?;
    if !text.lines().any(|l| l.trim_start().starts_with("name")) {
        if let Some(stem) = path.file_stem() {
            cfg.name = stem.to_string_lossy().into_owned();
        }
    }
    Ok(cfg)
}

/// Runs a validated scenario to its horizon.
pub fn run_scenario(cfg: &ScenarioConfig) -> MetricsReport {
    crate::simnet::run(cfg, false).report
}

/// Report as JSON text: sorted keys, two-space indent, trailing newline.
pub fn report_json(report: &MetricsReport) -> String {
    // serde_json's Map is ordered by key unless `preserve_order` is enabled
    let value = serde_json::to_value(report).expect("report serializes");
    let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
    s.push('\n');
    s
}

pub fn emit_report(report: &MetricsReport, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, report_json(report))
}

/// Differences between two report documents as `path: a != b` lines.
pub fn report_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_into("", a, b, &mut out);
    out
}

fn diff_into(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = format!("{path}/{k}");
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_into(&p, u, v, out),
                    (u, v) => out.push(format!("{p}: {} != {}", show(u), show(v))),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                diff_into(&format!("{path}/{i}"), u, v, out);
            }
        }
        _ if a != b => out.push(format!("{}: {} != {}", if path.is_empty() { "/" } else { path }, short(a), short(b))),
        _ => {}
    }
}

fn show(v: Option<&serde_json::Value>) -> String {
    v.map_or_else(|| "<missing>".into(), short)
}

fn short(v: &serde_json::Value) -> String {
    let s = v.to_string();
    if s.len() > 80 {
        format!("{}...", &s[..77])
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_deployment() {
        let cfg = ScenarioConfig::from_toml("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert_eq!(cfg.topology.ngws, 2);
        assert_eq!(cfg.topology.device_count(), 400);
    }

    #[test]
    fn negative_latency_is_reported() {
        let err = ScenarioConfig::from_toml("[topology.latency]\nnan_hop_ms = -5\n").unwrap_err();
        let ScenarioError::Invalid(v) = err else { panic!("expected validation error") };
        assert!(v.0.iter().any(|e| e.contains("nan_hop_ms")));
    }

    #[test]
    fn every_violation_is_listed() {
        let text = r#"
horizon_ms = 0
[limits]
hf_store = { count = 0, per = "hourly" }
[[attacks]]
kind = "tamper_rbc"
device = "sm-09-01-01"
start_ms = 10
"#;
        let ScenarioError::Invalid(v) = ScenarioConfig::from_toml(text).unwrap_err() else { panic!() };
        assert_eq!(v.0.len(), 3, "{v}");
        assert!(v.0[2].contains("sm-09-01-01"));
    }

    #[test]
    fn unknown_fields_are_parse_errors() {
        assert!(matches!(ScenarioConfig::from_toml("horizon = 5\n"), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn relay_headroom_is_checked() {
        let text = "[limits]\nrelay = { count = 4, per = \"hourly\" }\n";
        let ScenarioError::Invalid(v) = ScenarioConfig::from_toml(text).unwrap_err() else { panic!() };
        assert!(v.0[0].contains("relay"));
    }

    #[test]
    fn events_and_policies_parse() {
        let text = r#"
[[events]]
kind = "ct"
target = "actuator-01-01-1"
command = "off"
at_ms = 1000

[[policies]]
scope = "ngw-01"
requester = "auditor"
request_type = "Access"
tx_limit = 2
"#;
        let cfg = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(cfg.events[0].at_ms(), 1000);
        assert_eq!(cfg.policies[0].rule().device_id, DeviceMatch::Any);
    }

    #[test]
    fn diff_lists_paths() {
        let a = serde_json::json!({"x": 1, "y": [1, 2], "z": "s"});
        let b = serde_json::json!({"x": 1, "y": [1, 3], "w": true});
        let d = report_diff(&a, &b);
        assert_eq!(d, vec!["/w: <missing> != true", "/y/1: 2 != 3", "/z: \"s\" != <missing>"]);
        assert!(report_diff(&a, &a).is_empty());
    }
}
