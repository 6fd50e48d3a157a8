//! Authorization against a policy header and per-window transaction limits.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::ledger::{Action, DeviceId, DeviceMatch, LimitDuration, PartyId, PolicyHeader, PolicyRule, TxType};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthRequest {
    pub requester: PartyId,
    pub tx_type: TxType,
    pub device_id: DeviceId,
    pub now_ms: u64,
}

impl AuthRequest {
    pub fn new(requester: &PartyId, tx_type: TxType, device_id: &DeviceId, now_ms: u64) -> Self {
        AuthRequest { requester: requester.clone(), tx_type, device_id: device_id.clone(), now_ms }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    NoRule,
    /// An explicit Deny rule matched first.
    Rule { rule_index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Allow { rule_index: usize, rule: PolicyRule },
    Deny { reason: DenyReason },
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow { .. })
    }
}

/// First match over `header.rules` on (requester, type, device); anything
/// unmatched is denied.
pub fn authorize(header: &PolicyHeader, req: &AuthRequest) -> Decision {
    let hit = header.rules.iter().enumerate().find(|(_, r)| {
        r.requester == req.requester && r.request_type == req.tx_type && r.device_id.matches(&req.device_id)
    });
    match hit {
        Some((rule_index, rule)) if rule.action == Action::Allow => {
            Decision::Allow { rule_index, rule: rule.clone() }
        }
        Some((rule_index, _)) => Decision::Deny { reason: DenyReason::Rule { rule_index } },
        None => Decision::Deny { reason: DenyReason::NoRule },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateVerdict {
    WithinLimit { count: u32 },
    Exceeded { count: u32 },
}

impl RateVerdict {
    pub fn count(self) -> u32 {
        match self {
            RateVerdict::WithinLimit { count } | RateVerdict::Exceeded { count } => count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    start_ms: u64,
    count: u32,
}

/// Fixed-window counters keyed by (device, transaction type). Windows are
/// aligned to simulation time zero.
#[derive(Debug, Clone, Default)]
pub struct RateCounterState {
    counters: HashMap<(DeviceId, TxType), Window>,
}

impl RateCounterState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Current count for the window containing `now_ms`, without counting.
    pub fn peek(&self, device: &DeviceId, tx_type: TxType, duration: LimitDuration, now_ms: u64) -> u32 {
        let start = window_start(duration, now_ms);
        match self.counters.get(&(device.clone(), tx_type)) {
            Some(w) if w.start_ms == start => w.count,
            _ => 0,
        }
    }
}

pub fn window_start(duration: LimitDuration, now_ms: u64) -> u64 {
    let len = duration.window_ms();
    now_ms - now_ms % len
}

/// Counts one transaction against `rule` and reports whether the window's
/// limit is now exceeded. The first `Exceeded` of a window carries
/// `count == tx_limit + 1`.
pub fn check_and_count(rc: &mut RateCounterState, rule: &PolicyRule, device: &DeviceId, now_ms: u64) -> RateVerdict {
    debug_assert_eq!(rule.action, Action::Allow, "limits only apply to allow rules");
    let start = window_start(rule.limit_duration, now_ms);
    let w = rc
        .counters
        .entry((device.clone(), rule.request_type))
        .or_insert(Window { start_ms: start, count: 0 });
    if w.start_ms != start {
        *w = Window { start_ms: start, count: 0 };
    }
    w.count = w.count.saturating_add(1);
    if w.count > rule.tx_limit {
        RateVerdict::Exceeded { count: w.count }
    } else {
        RateVerdict::WithinLimit { count: w.count }
    }
}

/// Grid applications with a default transaction limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum App {
    #[serde(rename = "ami_hf")]
    AmiHf,
    #[serde(rename = "ami_lf")]
    AmiLf,
    #[serde(rename = "drms_ct")]
    DrmsCt,
    #[serde(rename = "oms_ebt")]
    OmsEbt,
}

impl App {
    pub fn tx_type(self) -> TxType {
        match self {
            App::AmiHf | App::AmiLf => TxType::Store,
            App::DrmsCt => TxType::Ct,
            App::OmsEbt => TxType::Ebt,
        }
    }

    /// (limit, window). "3-4 times" style ranges resolve to the upper bound.
    pub fn default_limit(self) -> (u32, LimitDuration) {
        match self {
            App::AmiHf => (4, LimitDuration::Hourly),
            App::AmiLf => (1, LimitDuration::Weekly),
            App::DrmsCt => (4, LimitDuration::Daily),
            // no published figure; mirrors the HF rate
            App::OmsEbt => (4, LimitDuration::Hourly),
        }
    }
}

pub fn default_policy_for(app: App, requester: PartyId, device: impl Into<DeviceMatch>) -> PolicyRule {
    let (limit, duration) = app.default_limit();
    PolicyRule::allow(requester, app.tx_type(), device, limit, duration)
}
