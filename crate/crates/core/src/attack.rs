//! Attack injection and detection scoring: flooding, stored-data
//! modification and linking.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::Stream;
use crate::keys::KeyId;
use crate::ledger::{DeviceId, Ledger, PartyId, Transaction};
use crate::miner::{Record, StoredPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxSelector {
    #[default]
    Last,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    FlipPayloadByte,
    DeleteLast,
}

fn lf() -> Stream {
    Stream::Lf
}

fn hf() -> Stream {
    Stream::Hf
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    /// The device emits stores at `rate_per_hour`, replacing its normal
    /// HF traffic. An HGW as target floods outbound from the gateway itself.
    Ddos { device: DeviceId, rate_per_hour: u32, start_ms: u64, duration_ms: u64 },
    /// Direct modification of one remote chain.
    TamperRbc {
        device: DeviceId,
        #[serde(default = "hf")]
        stream: Stream,
        #[serde(default)]
        selector: TxSelector,
        /// Overrides `selector`.
        #[serde(default)]
        tx_number: Option<u64>,
        #[serde(default)]
        mutation: Mutation,
        start_ms: u64,
    },
    /// Consistent rewrite of one broadcast record in the device's local and
    /// remote chains.
    TamperBoth {
        device: DeviceId,
        #[serde(default = "lf")]
        stream: Stream,
        /// Broadcast id; the latest recorded one when absent.
        #[serde(default)]
        broadcast: Option<u64>,
        start_ms: u64,
    },
    /// Metadata-only linking attempt on the storage contents.
    LinkingProbe {
        #[serde(default)]
        start_ms: Option<u64>,
    },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Ddos { .. } => "ddos",
            AttackSpec::TamperRbc { .. } => "tamper_rbc",
            AttackSpec::TamperBoth { .. } => "tamper_both",
            AttackSpec::LinkingProbe { .. } => "linking_probe",
        }
    }

    pub fn target(&self) -> Option<&DeviceId> {
        match self {
            AttackSpec::Ddos { device, .. } | AttackSpec::TamperRbc { device, .. } | AttackSpec::TamperBoth { device, .. } => {
                Some(device)
            }
            AttackSpec::LinkingProbe { .. } => None,
        }
    }

    /// Injection time; a probe without one runs after the horizon.
    pub fn start_ms(&self) -> Option<u64> {
        match self {
            AttackSpec::Ddos { start_ms, .. } | AttackSpec::TamperRbc { start_ms, .. } | AttackSpec::TamperBoth { start_ms, .. } => {
                Some(*start_ms)
            }
            AttackSpec::LinkingProbe { start_ms } => *start_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("selector does not resolve to a transaction")]
    SelectorUnresolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    RateLimit,
    StoreAuthMismatch,
    BroadcastAudit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub attack_id: usize,
    pub kind: String,
    pub target: Option<DeviceId>,
    pub injected_at_ms: u64,
    pub detected: bool,
    pub mechanism: Option<Mechanism>,
    pub detect_latency_ms: Option<u64>,
    /// Alarm transactions about the target delivered to the control center.
    pub alarms_to_cc: u32,
    /// Why detection did not happen, when it did not.
    pub note: Option<String>,
}

/// Mutates one transaction of a remote chain in place, bypassing every
/// check. Returns the affected transaction number.
pub fn tamper_rbc<R: Rng>(
    rbc: &mut Ledger,
    selector: TxSelector,
    tx_number: Option<u64>,
    mutation: Mutation,
    rng: &mut R,
) -> Result<u64, AttackError> {
    let count = rbc.tx_count() as u64;
    if count < 2 {
        return Err(AttackError::SelectorUnresolved);
    }
    match mutation {
        Mutation::DeleteLast => rbc.tamper(|blocks| {
            let block = blocks.iter_mut().rev().find(|b| !b.transactions.is_empty()).expect("non-empty chain");
            Ok(block.transactions.pop().expect("non-empty block").tx_number)
        }),
        Mutation::FlipPayloadByte => {
            let target = match (tx_number, selector) {
                (Some(n), _) if n > 0 && n < count => n,
                (Some(_), _) => return Err(AttackError::SelectorUnresolved),
                (None, TxSelector::Last) => count - 1,
                (None, TxSelector::Random) => rng.gen_range(1..count),
            };
            let flip: u8 = rng.gen_range(1..=255);
            let pick: usize = rng.gen();
            rbc.tamper(|blocks| {
                let tx = find_tx(blocks.iter_mut().flat_map(|b| b.transactions.iter_mut()), target)?;
                let i = pick % tx.payload_cipher.len();
                tx.payload_cipher[i] ^= flip;
                Ok(target)
            })
        }
    }
}

fn find_tx<'a>(mut it: impl Iterator<Item = &'a mut Transaction>, n: u64) -> Result<&'a mut Transaction, AttackError> {
    it.find(|t| t.tx_number == n).ok_or(AttackError::SelectorUnresolved)
}

fn broadcast_of(tx: &Transaction) -> Option<crate::miner::BroadcastFrame> {
    match StoredPayload::from_bytes(&tx.payload_cipher) {
        Ok(StoredPayload::Public(Record::Broadcast(b))) => Some(b),
        _ => None,
    }
}

/// Rewrites the body of one broadcast record identically in both copies
/// and fixes its payload digest, so the two chains still agree with each
/// other. Returns the broadcast id.
pub fn tamper_both(lbc: &mut Ledger, rbc: &mut Ledger, broadcast: Option<u64>) -> Result<u64, AttackError> {
    let hasher = rbc.hasher();
    let (tx_number, mut frame) = rbc
        .transactions()
        .filter_map(|(_, tx)| broadcast_of(tx).map(|b| (tx.tx_number, b)))
        .filter(|(_, b)| broadcast.is_none_or(|id| b.id == id))
        .last()
        .ok_or(AttackError::SelectorUnresolved)?;
    let in_lbc = lbc
        .transactions()
        .any(|(_, tx)| tx.tx_number == tx_number && broadcast_of(tx).is_some_and(|b| b.id == frame.id));
    if !in_lbc {
        return Err(AttackError::SelectorUnresolved);
    }
    frame.body.iter_mut().for_each(|b| *b = b.wrapping_add(1));
    frame.body.push(b'!');
    let id = frame.id;
    let forged = StoredPayload::Public(Record::Broadcast(frame)).to_bytes();
    let digest = hasher.digest(&forged);
    for l in [lbc, rbc] {
        l.tamper(|blocks| {
            let tx = find_tx(blocks.iter_mut().flat_map(|b| b.transactions.iter_mut()), tx_number)?;
            tx.payload_cipher = forged.clone();
            tx.payload_digest = digest;
            Ok::<_, AttackError>(())
        })?;
    }
    Ok(id)
}

/// What an adversary holding the storage sees of one chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerView {
    pub holder: PartyId,
    pub owner: DeviceId,
    pub key_ids: BTreeSet<KeyId>,
}

impl LedgerView {
    /// Owner id plus every key id visible in genesis records and
    /// ciphertext headers.
    pub fn of(holder: &PartyId, ledger: &Ledger) -> Self {
        let mut key_ids = BTreeSet::new();
        for (_, tx) in ledger.transactions() {
            match StoredPayload::from_bytes(&tx.payload_cipher) {
                Ok(StoredPayload::Sealed(ct)) => {
                    key_ids.insert(ct.key_id);
                }
                Ok(StoredPayload::Public(Record::Genesis { key_ids: ks })) => key_ids.extend(ks),
                _ => {}
            }
        }
        LedgerView { holder: holder.clone(), owner: ledger.owner().clone(), key_ids }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkReport {
    /// (control-center chain, utility chain) pairs sharing an identifier or key id.
    pub pairs_linked: usize,
    pub by_identifier: usize,
    pub by_key_id: usize,
    pub cc_ledgers: usize,
    pub utility_ledgers: usize,
    pub method: String,
    #[serde(skip)]
    pub links: Vec<(DeviceId, DeviceId)>,
}

/// Pairs every control-center-side chain with every utility-side chain
/// that shares its owner id or any key id.
pub fn linking_probe(cc_side: &[LedgerView], utility_side: &[LedgerView]) -> LinkReport {
    let mut by_owner: BTreeMap<&DeviceId, Vec<usize>> = BTreeMap::new();
    let mut by_key: BTreeMap<KeyId, Vec<usize>> = BTreeMap::new();
    for (i, v) in utility_side.iter().enumerate() {
        by_owner.entry(&v.owner).or_default().push(i);
        for k in &v.key_ids {
            by_key.entry(*k).or_default().push(i);
        }
    }
    let mut report = LinkReport {
        cc_ledgers: cc_side.len(),
        utility_ledgers: utility_side.len(),
        method: "identifier and key-id intersection".into(),
        ..LinkReport::default()
    };
    for hf in cc_side {
        let ids: BTreeSet<usize> = by_owner.get(&hf.owner).into_iter().flatten().copied().collect();
        let keys: BTreeSet<usize> = hf.key_ids.iter().flat_map(|k| by_key.get(k).into_iter().flatten().copied()).collect();
        report.by_identifier += ids.len();
        report.by_key_id += keys.len();
        for j in ids.union(&keys) {
            report.links.push((hf.owner.clone(), utility_side[*j].owner.clone()));
        }
    }
    report.pairs_linked = report.links.len();
    report
}
