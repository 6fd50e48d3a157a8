//! Counters, latency statistics and the run report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::{DetectionRecord, LinkReport};
use crate::device::Switch;
use crate::ledger::TxType;
use crate::miner::{AlarmCause, AlarmDetail, KeyScheme};

/// Traffic classes tracked end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    HfStore,
    LfStore,
    Ebt,
    RtuStore,
    BroadcastRecord,
    Access,
    Flood,
    Otft,
    Ct,
    Alarm,
    Audit,
    Remove,
    Control,
}

impl Class {
    pub fn name(self) -> &'static str {
        match self {
            Class::HfStore => "hf_store",
            Class::LfStore => "lf_store",
            Class::Ebt => "ebt",
            Class::RtuStore => "rtu_store",
            Class::BroadcastRecord => "broadcast_record",
            Class::Access => "access",
            Class::Flood => "flood",
            Class::Otft => "otft",
            Class::Ct => "ct",
            Class::Alarm => "alarm",
            Class::Audit => "audit",
            Class::Remove => "remove",
            Class::Control => "control",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClassStats {
    pub generated: u64,
    pub forwarded: u64,
    pub dropped: u64,
    pub rejected: u64,
    latency_ms: Vec<u64>,
    base_ms: Vec<u64>,
    stages_min: Option<u32>,
    stages_max: u32,
}

impl ClassStats {
    pub fn delivered(&mut self, latency_ms: u64, base_ms: u64, stages: u32) {
        self.forwarded += 1;
        self.latency_ms.push(latency_ms);
        self.base_ms.push(base_ms);
        self.stages_min = Some(self.stages_min.map_or(stages, |s| s.min(stages)));
        self.stages_max = self.stages_max.max(stages);
    }

    pub fn reconciles(&self) -> bool {
        self.generated == self.forwarded + self.dropped + self.rejected
    }

    pub fn report(&self) -> ClassReport {
        ClassReport {
            generated: self.generated,
            forwarded: self.forwarded,
            dropped: self.dropped,
            rejected: self.rejected,
            latency: LatencyStats::of(&self.latency_ms),
            latency_without_crypto: LatencyStats::of(&self.base_ms),
            crypto_stages_min: self.stages_min.unwrap_or(0),
            crypto_stages_max: self.stages_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ms: f64,
    pub p95_ms: u64,
    pub max_ms: u64,
}

impl LatencyStats {
    /// Mean rounded to microseconds; p95 by nearest rank.
    pub fn of(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return LatencyStats { count: 0, mean_ms: 0.0, p95_ms: 0, max_ms: 0 };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let sum: u128 = sorted.iter().map(|&v| v as u128).sum();
        let mean = (sum as f64 / n as f64 * 1000.0).round() / 1000.0;
        let rank = (n * 95).div_ceil(100).max(1);
        LatencyStats { count: n as u64, mean_ms: mean, p95_ms: sorted[rank - 1], max_ms: sorted[n - 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub generated: u64,
    pub forwarded: u64,
    pub dropped: u64,
    pub rejected: u64,
    pub latency: LatencyStats,
    pub latency_without_crypto: LatencyStats,
    pub crypto_stages_min: u32,
    pub crypto_stages_max: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    pub at_ms: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmReport {
    pub raised_at_ms: u64,
    pub raised_by: String,
    pub cause: AlarmCause,
    pub subject: String,
    pub detail: AlarmDetail,
    /// (recipient, delivery time)
    pub delivered: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokenChain {
    pub holder: String,
    pub owner: String,
    pub destination: String,
    pub block_number: u64,
    pub reason: String,
    pub tampered: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub ledgers: u64,
    pub valid: u64,
    pub tampered: u64,
    pub broken: Vec<BrokenChain>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterCounts {
    pub hf_forwarded: u64,
    pub lf_forwarded: u64,
    pub ebt_forwarded: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestReport {
    pub id: u64,
    pub tx_type: TxType,
    pub requester: String,
    pub target: String,
    pub issued_at_ms: u64,
    pub outcome: String,
    pub latency_ms: Option<u64>,
    pub register_wh: Option<u64>,
    pub command: Option<Switch>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySummary {
    pub ngws: u32,
    pub hgws: u32,
    pub meters: u32,
    pub devices: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSummary {
    pub events: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub horizon_ms: u64,
    pub key_scheme: KeyScheme,
    pub per_class_keys: bool,
    pub crypto_overhead_ms: u64,
    pub topology: TopologySummary,
    pub classes: BTreeMap<String, ClassReport>,
    /// "class/reason" → count
    pub drops: BTreeMap<String, u64>,
    pub alarms: Vec<AlarmReport>,
    pub detections: Vec<DetectionRecord>,
    pub chains: ChainSummary,
    pub meters: BTreeMap<String, MeterCounts>,
    pub requests: Vec<RequestReport>,
    pub actuators: BTreeMap<String, Switch>,
    pub linking: Option<LinkReport>,
    /// Digest of every decrypted non-genesis payload per storage miner.
    pub storage_payload_digests: BTreeMap<String, String>,
    pub checks: BTreeMap<String, u64>,
    pub violations: Vec<Violation>,
    pub event_log: LogSummary,
}

impl MetricsReport {
    pub fn class(&self, c: Class) -> &ClassReport {
        &self.classes[c.name()]
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_stats_oracle() {
        let s: Vec<u64> = (1..=20).collect();
        let st = LatencyStats::of(&s);
        assert_eq!(st.mean_ms, 10.5);
        // nearest rank: ceil(0.95 * 20) = 19
        assert_eq!(st.p95_ms, 19);
        assert_eq!(st.max_ms, 20);
        assert_eq!(LatencyStats::of(&[7]).p95_ms, 7);
        assert_eq!(LatencyStats::of(&[]).count, 0);
    }

    #[test]
    fn reconciliation() {
        let mut c = ClassStats { generated: 3, ..Default::default() };
        c.delivered(10, 5, 1);
        c.dropped = 1;
        assert!(!c.reconciles());
        c.rejected = 1;
        assert!(c.reconciles());
        assert_eq!(c.report().crypto_stages_min, 1);
    }
}
