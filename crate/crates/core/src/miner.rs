//! Gateway and storage miners.
//!
//! A [`MinerState`] authorizes, rate-limits and logs transactions. Home
//! gateways (HGW) and neighborhood gateways (NGW) keep the local chains,
//! the two storage miners keep the remote copies. Nothing here does
//! proof-of-work: every chain has exactly one writer.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::Switch;
use crate::keys::{invalidate_key, Ciphertext, DataClass, KeyControl, KeyError, KeyExchange, KeyId, KeyTable, SharedKey};
use crate::ledger::codec::{DecodeError, Decoder, Encoder};
use crate::ledger::{
    Destination, DeviceId, Digest, Hasher, Ledger, LedgerError, PartyId, PolicyHeader, PolicyRule, Transaction,
    TxHead, TxRef, TxType, DEFAULT_BLOCK_CAPACITY,
};
use crate::policy::{authorize, check_and_count, window_start, AuthRequest, Decision, DenyReason, RateCounterState, RateVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Hgw,
    Ngw,
    CcStorage,
    UStorage,
}

impl Role {
    pub fn is_storage(self) -> bool {
        matches!(self, Role::CcStorage | Role::UStorage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyScheme {
    /// Two pairwise keys; the local miner re-encrypts between hops.
    A,
    /// One key shared by device, local miner and storage.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadcastKind {
    Pricing,
    Drms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridEvent {
    PowerOutage,
    PowerRestored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BroadcastFrame {
    pub id: u64,
    pub origin: PartyId,
    pub kind: BroadcastKind,
    pub issued_at_ms: u64,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmCause {
    ExcessTraffic,
    AuditMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmFrame {
    pub cause: AlarmCause,
    pub subject: DeviceId,
    pub raised_by: PartyId,
    pub at_ms: u64,
    /// Transaction type that exceeded its limit, or the audited chain's
    /// mismatching broadcast ids.
    pub detail: AlarmDetail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmDetail {
    Excess { tx_type: TxType, window_start_ms: u64, count: u32 },
    Audit { mismatched: Vec<u64> },
}

/// Plaintext frames carried in transaction payloads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Genesis { key_ids: Vec<KeyId> },
    Reading { at_ms: u64, register_wh: u64 },
    Event { at_ms: u64, event: GridEvent },
    Broadcast(BroadcastFrame),
    Alarm(AlarmFrame),
    Otft { request_id: u64, target: DeviceId, register_wh: Option<u64> },
    Ct { request_id: u64, target: DeviceId, command: Switch },
    Remove,
    Sample { at_ms: u64, value: i64 },
}

fn id_from(d: &mut Decoder<'_>, what: &'static str) -> Result<DeviceId, DecodeError> {
    DeviceId::new(d.string(what)?).map_err(|_| DecodeError::EmptyId)
}

impl Record {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_capacity(48);
        match self {
            Record::Genesis { key_ids } => {
                e.u8(1).u32(key_ids.len() as u32);
                for k in key_ids {
                    e.u64(k.0);
                }
            }
            Record::Reading { at_ms, register_wh } => {
                e.u8(2).u64(*at_ms).u64(*register_wh);
            }
            Record::Event { at_ms, event } => {
                e.u8(3).u64(*at_ms).u8(*event as u8);
            }
            Record::Broadcast(b) => {
                e.u8(4).u64(b.id).str(b.origin.as_str()).u8(b.kind as u8).u64(b.issued_at_ms).bytes(&b.body);
            }
            Record::Alarm(a) => {
                e.u8(5).u8(a.cause as u8).str(a.subject.as_str()).str(a.raised_by.as_str()).u64(a.at_ms);
                match &a.detail {
                    AlarmDetail::Excess { tx_type, window_start_ms, count } => {
                        e.u8(0).u8(tx_type.code()).u64(*window_start_ms).u32(*count);
                    }
                    AlarmDetail::Audit { mismatched } => {
                        e.u8(1).u32(mismatched.len() as u32);
                        for id in mismatched {
                            e.u64(*id);
                        }
                    }
                }
            }
            Record::Otft { request_id, target, register_wh } => {
                e.u8(6).u64(*request_id).str(target.as_str());
                match register_wh {
                    Some(v) => e.u8(1).u64(*v),
                    None => e.u8(0),
                };
            }
            Record::Ct { request_id, target, command } => {
                e.u8(7).u64(*request_id).str(target.as_str()).u8(matches!(command, Switch::On) as u8);
            }
            Record::Remove => {
                e.u8(8);
            }
            Record::Sample { at_ms, value } => {
                e.u8(9).u64(*at_ms).u64(*value as u64);
            }
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let r = Self::decode(&mut d)?;
        d.finish()?;
        Ok(r)
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let bad = |what, tag, offset| DecodeError::BadTag { what, tag, offset };
        let offset = d.position();
        Ok(match d.u8()? {
            1 => {
                let n = d.u32()? as usize;
                let mut key_ids = Vec::with_capacity(n.min(16));
                for _ in 0..n {
                    key_ids.push(KeyId(d.u64()?));
                }
                Record::Genesis { key_ids }
            }
            2 => Record::Reading { at_ms: d.u64()?, register_wh: d.u64()? },
            3 => {
                let at_ms = d.u64()?;
                let off = d.position();
                let event = match d.u8()? {
                    0 => GridEvent::PowerOutage,
                    1 => GridEvent::PowerRestored,
                    t => return Err(bad("grid event", t, off)),
                };
                Record::Event { at_ms, event }
            }
            4 => {
                let id = d.u64()?;
                let origin = id_from(d, "origin")?;
                let off = d.position();
                let kind = match d.u8()? {
                    0 => BroadcastKind::Pricing,
                    1 => BroadcastKind::Drms,
                    t => return Err(bad("broadcast kind", t, off)),
                };
                let issued_at_ms = d.u64()?;
                let body = d.bytes()?.to_vec();
                Record::Broadcast(BroadcastFrame { id, origin, kind, issued_at_ms, body })
            }
            5 => {
                let off = d.position();
                let cause = match d.u8()? {
                    0 => AlarmCause::ExcessTraffic,
                    1 => AlarmCause::AuditMismatch,
                    t => return Err(bad("alarm cause", t, off)),
                };
                let subject = id_from(d, "subject")?;
                let raised_by = id_from(d, "raised_by")?;
                let at_ms = d.u64()?;
                let detail = if d.bool("alarm detail")? {
                    let n = d.u32()? as usize;
                    let mut mismatched = Vec::with_capacity(n.min(64));
                    for _ in 0..n {
                        mismatched.push(d.u64()?);
                    }
                    AlarmDetail::Audit { mismatched }
                } else {
                    let off = d.position();
                    let code = d.u8()?;
                    let tx_type = TxType::from_code(code).ok_or(bad("tx type", code, off))?;
                    AlarmDetail::Excess { tx_type, window_start_ms: d.u64()?, count: d.u32()? }
                };
                Record::Alarm(AlarmFrame { cause, subject, raised_by, at_ms, detail })
            }
            6 => {
                let request_id = d.u64()?;
                let target = id_from(d, "target")?;
                let register_wh = if d.bool("reading")? { Some(d.u64()?) } else { None };
                Record::Otft { request_id, target, register_wh }
            }
            7 => {
                let request_id = d.u64()?;
                let target = id_from(d, "target")?;
                let command = if d.bool("command")? { Switch::On } else { Switch::Off };
                Record::Ct { request_id, target, command }
            }
            8 => Record::Remove,
            9 => Record::Sample { at_ms: d.u64()?, value: d.u64()? as i64 },
            t => return Err(bad("record", t, offset)),
        })
    }
}

/// What a transaction's `payload_cipher` holds: either a sealed record or
/// a public one (genesis, broadcasts, alarms, logs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoredPayload {
    Sealed(Ciphertext),
    Public(Record),
}

impl StoredPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            StoredPayload::Sealed(ct) => {
                let mut out = vec![1];
                out.extend_from_slice(&ct.to_bytes());
                out
            }
            StoredPayload::Public(r) => {
                let mut out = vec![2];
                out.extend_from_slice(&r.to_bytes());
                out
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        match bytes.first() {
            Some(1) => Ok(StoredPayload::Sealed(Ciphertext::from_bytes(&bytes[1..])?)),
            Some(2) => Ok(StoredPayload::Public(Record::from_bytes(&bytes[1..])?)),
            Some(&tag) => Err(DecodeError::BadTag { what: "payload", tag, offset: 0 }),
            None => Err(DecodeError::Truncated(0)),
        }
    }
}

/// A local-chain transaction on its way to the remote chain, with the
/// local chain's head after the append as authentication fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreEnvelope {
    pub inner: Transaction,
    pub destination: Destination,
    pub auth_block_number: u64,
    pub auth_tx_digest: Digest,
}

/// Proof that a request passed policy and rate checks. Only obtainable
/// from [`MinerState::admit`]; forwarding operations consume one.
#[derive(Debug, Clone, PartialEq, Eq)]
#[non_exhaustive]
pub struct Authorized {
    pub miner: PartyId,
    pub requester: PartyId,
    pub tx_type: TxType,
    pub device: DeviceId,
    pub rule_index: usize,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Denied,
    Exceeded,
    AuthFailure,
    UnknownChain,
    Malformed,
    Mismatch,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Dropped {
    #[error("denied by policy ({0:?})")]
    Denied(DenyReason),
    /// `first` is set on the first excess of a window, which raises the alarm.
    #[error("limit exceeded ({count} in window starting {window_start_ms})")]
    Exceeded { count: u32, window_start_ms: u64, first: bool },
    #[error("payload authentication failed")]
    AuthFailure,
    #[error("no chain for {0}")]
    UnknownChain(DeviceId),
    #[error("malformed transaction")]
    Malformed,
    #[error("authentication fields do not match the remote chain")]
    Mismatch,
}

impl Dropped {
    pub fn reason(&self) -> DropReason {
        match self {
            Dropped::Denied(_) => DropReason::Denied,
            Dropped::Exceeded { .. } => DropReason::Exceeded,
            Dropped::AuthFailure => DropReason::AuthFailure,
            Dropped::UnknownChain(_) => DropReason::UnknownChain,
            Dropped::Malformed => DropReason::Malformed,
            Dropped::Mismatch => DropReason::Mismatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MinerError {
    #[error("{0} is already onboarded")]
    AlreadyOnboarded(DeviceId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("{0} cannot perform this operation")]
    WrongRole(PartyId),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Where a policy decision's header comes from.
#[derive(Debug, Clone, Copy)]
pub enum PolicySource<'a> {
    /// The miner's own chain.
    Own,
    /// A device chain held by the miner.
    Chain(&'a DeviceId, Destination),
}

/// Keys a miner uses for one device chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainKeys {
    /// Key the payload arrives under.
    pub inbound: KeyId,
    /// Key the payload is stored and forwarded under.
    pub outbound: KeyId,
}

#[derive(Debug, Clone)]
pub struct ForwardedStore {
    pub envelope: StoreEnvelope,
    pub plaintext: Vec<u8>,
    pub at: TxRef,
    pub auth: Authorized,
}

#[derive(Debug, Clone)]
pub struct StoreAccepted {
    pub at: TxRef,
    pub head: TxHead,
    /// Decrypted payload, when sealed.
    pub plaintext: Option<Vec<u8>>,
    pub auth: Authorized,
}

/// A broadcast copy as held by a gateway, the reference for audits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastCopy {
    pub digest: Digest,
    pub origin: PartyId,
    pub issued_at_ms: u64,
}

/// One broadcast record as read back from a remote chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub tx_number: u64,
    /// `None` when the record no longer parses as a broadcast.
    pub broadcast_id: Option<u64>,
    pub payload_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditOutcome {
    AuditOk,
    AuditMismatch { mismatched: Vec<u64>, malformed: usize },
}

/// Result of removing a device: key control messages for the other key
/// holders, and the Remove transactions to sync to remote chains.
#[derive(Debug, Clone)]
pub struct Removal {
    pub controls: Vec<KeyControl>,
    pub envelopes: Vec<StoreEnvelope>,
}

#[derive(Debug, Clone)]
pub struct GenesisReceipt {
    pub device: DeviceId,
    pub keys: Vec<SharedKey>,
    /// (miner, chain owner, destination) of every genesis append.
    pub appends: Vec<(PartyId, DeviceId, Destination)>,
}

/// A device to onboard.
#[derive(Debug, Clone)]
pub enum DeviceSpec {
    /// Smart meter with one chain per data stream. With `per_class_keys`
    /// off, both chains share the meter's id and a single key.
    Meter {
        id: DeviceId,
        hf_chain: DeviceId,
        lf_chain: DeviceId,
        hf_policy: Vec<PolicyRule>,
        lf_policy: Vec<PolicyRule>,
        per_class_keys: bool,
    },
    /// HAN device other than a meter: key with the HGW, local chain only.
    HanDevice { id: DeviceId, policy: Vec<PolicyRule> },
    /// Remote terminal unit under an NGW, stored to the control center.
    Rtu { id: DeviceId, policy: Vec<PolicyRule> },
}

impl DeviceSpec {
    pub fn id(&self) -> &DeviceId {
        match self {
            DeviceSpec::Meter { id, .. } | DeviceSpec::HanDevice { id, .. } | DeviceSpec::Rtu { id, .. } => id,
        }
    }
}

/// Shared context for onboarding.
pub struct Onboarding<'a> {
    pub kex: &'a mut KeyExchange,
    /// Key table of the device being onboarded.
    pub device_keys: &'a mut KeyTable,
    pub scheme: KeyScheme,
    pub now_ms: u64,
}

/// The storage miners a local miner uploads to.
pub struct Storages<'a> {
    pub cc: &'a mut MinerState,
    pub utility: &'a mut MinerState,
}

impl Storages<'_> {
    fn for_destination(&mut self, dest: Destination) -> &mut MinerState {
        match dest {
            Destination::Utility => self.utility,
            _ => self.cc,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinerState {
    pub id: PartyId,
    pub role: Role,
    pub parent: Option<PartyId>,
    pub children: BTreeSet<DeviceId>,
    pub keys: KeyTable,
    pub rates: RateCounterState,
    ledgers: BTreeMap<(DeviceId, Destination), Ledger>,
    retired: Vec<Ledger>,
    chain_keys: HashMap<(DeviceId, Destination), ChainKeys>,
    /// Device chains per onboarded device.
    device_chains: BTreeMap<DeviceId, Vec<(DeviceId, Destination)>>,
    broadcasts: BTreeMap<u64, BroadcastCopy>,
    public_index: HashMap<(DeviceId, Destination), Vec<TxRef>>,
    capacity: usize,
    hasher: Hasher,
    allowed: u64,
    denied: u64,
}

impl MinerState {
    /// New miner whose own chain starts with a genesis carrying `policy`.
    pub fn new(id: PartyId, role: Role, policy: PolicyHeader, now_ms: u64) -> Self {
        Self::with_capacity(id, role, policy, now_ms, DEFAULT_BLOCK_CAPACITY, Hasher::sha256())
    }

    pub fn with_capacity(
        id: PartyId,
        role: Role,
        policy: PolicyHeader,
        now_ms: u64,
        capacity: usize,
        hasher: Hasher,
    ) -> Self {
        let mut own = Ledger::with_capacity(id.clone(), Destination::Local, policy, capacity, hasher);
        let genesis = StoredPayload::Public(Record::Genesis { key_ids: Vec::new() });
        own.append_transaction(Transaction::genesis(id.clone(), genesis.to_bytes(), now_ms, hasher))
            .expect("fresh ledger accepts genesis");
        let mut ledgers = BTreeMap::new();
        ledgers.insert((id.clone(), Destination::Local), own);
        MinerState {
            id,
            role,
            parent: None,
            children: BTreeSet::new(),
            keys: KeyTable::new(),
            rates: RateCounterState::new(),
            ledgers,
            retired: Vec::new(),
            chain_keys: HashMap::new(),
            device_chains: BTreeMap::new(),
            broadcasts: BTreeMap::new(),
            public_index: HashMap::new(),
            capacity,
            hasher,
            allowed: 0,
            denied: 0,
        }
    }

    pub fn hasher(&self) -> Hasher {
        self.hasher
    }

    pub fn own_chain(&self) -> &Ledger {
        &self.ledgers[&(self.id.clone(), Destination::Local)]
    }

    fn own_chain_mut(&mut self) -> &mut Ledger {
        self.ledgers.get_mut(&(self.id.clone(), Destination::Local)).expect("own chain exists")
    }

    pub fn ledger(&self, owner: &DeviceId, dest: Destination) -> Option<&Ledger> {
        self.ledgers.get(&(owner.clone(), dest))
    }

    pub fn ledger_mut(&mut self, owner: &DeviceId, dest: Destination) -> Option<&mut Ledger> {
        self.ledgers.get_mut(&(owner.clone(), dest))
    }

    /// Every live chain, the miner's own included.
    pub fn ledgers(&self) -> impl Iterator<Item = (&(DeviceId, Destination), &Ledger)> {
        self.ledgers.iter()
    }

    /// Chains closed by device removal.
    pub fn retired(&self) -> &[Ledger] {
        &self.retired
    }

    pub fn chain_keys(&self, owner: &DeviceId, dest: Destination) -> Option<ChainKeys> {
        self.chain_keys.get(&(owner.clone(), dest)).copied()
    }

    pub fn is_onboarded(&self, device: &DeviceId) -> bool {
        self.device_chains.contains_key(device)
    }

    pub fn device_chains(&self, device: &DeviceId) -> &[(DeviceId, Destination)] {
        self.device_chains.get(device).map(Vec::as_slice).unwrap_or(&[])
    }

    /// (allowed, denied) decision counts.
    pub fn decision_counts(&self) -> (u64, u64) {
        (self.allowed, self.denied)
    }

    pub fn broadcast_copies(&self) -> &BTreeMap<u64, BroadcastCopy> {
        &self.broadcasts
    }

    /// Upserts a rule into the own chain's tail header.
    pub fn set_policy(&mut self, rule: PolicyRule) -> Result<(), LedgerError> {
        self.own_chain_mut().update_policy(rule, crate::ledger::Actor::Utility, |_| false)
    }

    /// Policy check followed by the rate check. Only this produces an
    /// [`Authorized`].
    pub fn admit(&mut self, source: PolicySource<'_>, req: &AuthRequest) -> Result<Authorized, Dropped> {
        let ledger = match source {
            PolicySource::Own => self.own_chain(),
            PolicySource::Chain(owner, dest) => {
                self.ledger(owner, dest).ok_or_else(|| Dropped::UnknownChain(owner.clone()))?
            }
        };
        let header = ledger.current_policy().map_err(|_| Dropped::UnknownChain(ledger.owner().clone()))?;
        let (rule_index, rule) = match authorize(header, req) {
            Decision::Allow { rule_index, rule } => (rule_index, rule),
            Decision::Deny { reason } => {
                self.denied += 1;
                return Err(Dropped::Denied(reason));
            }
        };
        match check_and_count(&mut self.rates, &rule, &req.device_id, req.now_ms) {
            RateVerdict::WithinLimit { count } => {
                self.allowed += 1;
                Ok(Authorized {
                    miner: self.id.clone(),
                    requester: req.requester.clone(),
                    tx_type: req.tx_type,
                    device: req.device_id.clone(),
                    rule_index,
                    count,
                })
            }
            RateVerdict::Exceeded { count } => Err(Dropped::Exceeded {
                count,
                window_start_ms: window_start(rule.limit_duration, req.now_ms),
                first: count == rule.tx_limit + 1,
            }),
        }
    }

    fn genesis_payload(keys: &[KeyId]) -> Vec<u8> {
        StoredPayload::Public(Record::Genesis { key_ids: keys.to_vec() }).to_bytes()
    }

    fn open_chain(&mut self, owner: &DeviceId, dest: Destination, policy: &[PolicyRule], genesis: &Transaction) {
        let mut l = Ledger::with_capacity(owner.clone(), dest, PolicyHeader::new(policy.to_vec()), self.capacity, self.hasher);
        l.append_transaction(genesis.clone()).expect("fresh ledger accepts genesis");
        if let Some(old) = self.ledgers.insert((owner.clone(), dest), l) {
            self.retired.push(old);
        }
    }

    /// Onboards a device: establishes its keys and appends its genesis
    /// to every chain that will hold its data.
    pub fn add_device(
        &mut self,
        storages: Option<Storages<'_>>,
        ob: &mut Onboarding<'_>,
        spec: &DeviceSpec,
    ) -> Result<GenesisReceipt, MinerError> {
        let device = spec.id().clone();
        if self.is_onboarded(&device) {
            return Err(MinerError::AlreadyOnboarded(device));
        }
        let mut receipt = GenesisReceipt { device: device.clone(), keys: Vec::new(), appends: Vec::new() };
        match spec {
            DeviceSpec::Meter { hf_chain, lf_chain, hf_policy, lf_policy, per_class_keys, .. } => {
                if self.role != Role::Hgw {
                    return Err(MinerError::WrongRole(self.id.clone()));
                }
                let mut st = storages.ok_or(MinerError::WrongRole(self.id.clone()))?;
                let streams = [
                    (hf_chain, Destination::ControlCenter, DataClass::HighFreq, hf_policy),
                    (lf_chain, Destination::Utility, DataClass::LowFreq, lf_policy),
                ];
                let shared = if *per_class_keys {
                    None
                } else {
                    let (cc, u) = (st.cc.id.clone(), st.utility.id.clone());
                    let key = ob.kex.establish_among(&mut self.keys, &[&device, &self.id, &cc, &u], DataClass::Generic, &device)?;
                    st.cc.keys.insert(key.clone())?;
                    st.utility.keys.insert(key.clone())?;
                    ob.device_keys.insert(key.clone())?;
                    receipt.keys.push(key.clone());
                    Some(key.key_id())
                };
                for (chain, dest, class, policy) in streams {
                    let storage = st.for_destination(dest);
                    let keys = match shared {
                        Some(k) => ChainKeys { inbound: k, outbound: k },
                        None => self.establish(ob, &device, storage, class, &mut receipt)?,
                    };
                    let key_ids = if keys.inbound == keys.outbound { vec![keys.inbound] } else { vec![keys.inbound, keys.outbound] };
                    let genesis = Transaction::genesis(chain.clone(), Self::genesis_payload(&key_ids), ob.now_ms, self.hasher);
                    self.open_chain(chain, dest, policy, &genesis);
                    self.chain_keys.insert((chain.clone(), dest), keys);
                    storage.open_chain(chain, dest, policy, &genesis);
                    storage.chain_keys.insert((chain.clone(), dest), ChainKeys { inbound: keys.outbound, outbound: keys.outbound });
                    storage.device_chains.entry(device.clone()).or_default().push((chain.clone(), dest));
                    self.device_chains.entry(device.clone()).or_default().push((chain.clone(), dest));
                    receipt.appends.push((self.id.clone(), chain.clone(), dest));
                    receipt.appends.push((storage.id.clone(), chain.clone(), dest));
                }
            }
            DeviceSpec::HanDevice { policy, .. } => {
                let key = ob.kex.establish_among(&mut self.keys, &[&device, &self.id], DataClass::Generic, &device)?;
                ob.device_keys.insert(key.clone())?;
                let genesis =
                    Transaction::genesis(device.clone(), Self::genesis_payload(&[key.key_id()]), ob.now_ms, self.hasher);
                self.open_chain(&device, Destination::Local, policy, &genesis);
                let k = key.key_id();
                self.chain_keys.insert((device.clone(), Destination::Local), ChainKeys { inbound: k, outbound: k });
                self.device_chains.entry(device.clone()).or_default().push((device.clone(), Destination::Local));
                receipt.appends.push((self.id.clone(), device.clone(), Destination::Local));
                receipt.keys.push(key);
            }
            DeviceSpec::Rtu { policy, .. } => {
                if self.role != Role::Ngw {
                    return Err(MinerError::WrongRole(self.id.clone()));
                }
                let mut st = storages.ok_or(MinerError::WrongRole(self.id.clone()))?;
                let dest = Destination::ControlCenter;
                let storage = st.for_destination(dest);
                let keys = self.establish(ob, &device, storage, DataClass::Generic, &mut receipt)?;
                let key_ids = if keys.inbound == keys.outbound { vec![keys.inbound] } else { vec![keys.inbound, keys.outbound] };
                let genesis = Transaction::genesis(device.clone(), Self::genesis_payload(&key_ids), ob.now_ms, self.hasher);
                self.open_chain(&device, dest, policy, &genesis);
                self.chain_keys.insert((device.clone(), dest), keys);
                storage.open_chain(&device, dest, policy, &genesis);
                storage.chain_keys.insert((device.clone(), dest), ChainKeys { inbound: keys.outbound, outbound: keys.outbound });
                storage.device_chains.entry(device.clone()).or_default().push((device.clone(), dest));
                self.device_chains.entry(device.clone()).or_default().push((device.clone(), dest));
                receipt.appends.push((self.id.clone(), device.clone(), dest));
                receipt.appends.push((storage.id.clone(), device.clone(), dest));
            }
        }
        self.children.insert(device);
        Ok(receipt)
    }

    fn establish(
        &mut self,
        ob: &mut Onboarding<'_>,
        device: &DeviceId,
        storage: &mut MinerState,
        class: DataClass,
        receipt: &mut GenesisReceipt,
    ) -> Result<ChainKeys, MinerError> {
        match ob.scheme {
            KeyScheme::B => {
                let key = ob.kex.establish_scheme_b(&mut self.keys, device, &self.id, &storage.id, class)?;
                storage.keys.insert(key.clone())?;
                ob.device_keys.insert(key.clone())?;
                let k = key.key_id();
                receipt.keys.push(key);
                Ok(ChainKeys { inbound: k, outbound: k })
            }
            KeyScheme::A => {
                let pair = ob.kex.establish_scheme_a(&mut self.keys, device, &self.id, &storage.id, class)?;
                ob.device_keys.insert(pair.key_dl.clone())?;
                storage.keys.insert(pair.key_lr.clone())?;
                let keys = ChainKeys { inbound: pair.key_dl.key_id(), outbound: pair.key_lr.key_id() };
                receipt.keys.push(pair.key_dl);
                receipt.keys.push(pair.key_lr);
                Ok(keys)
            }
        }
    }

    /// Local miner side of a device store: authorize and count, decrypt,
    /// re-encrypt under scheme A, append to the local chain and build the
    /// envelope for the remote chain.
    pub fn process_store(
        &mut self,
        chain: &DeviceId,
        dest: Destination,
        tx_type: TxType,
        ct: &Ciphertext,
        now_ms: u64,
    ) -> Result<ForwardedStore, Dropped> {
        let auth = self.admit(PolicySource::Chain(chain, dest), &AuthRequest::new(chain, tx_type, chain, now_ms))?;
        let keys = self.chain_keys(chain, dest).ok_or_else(|| Dropped::UnknownChain(chain.clone()))?;
        if ct.key_id != keys.inbound {
            return Err(Dropped::AuthFailure);
        }
        let plaintext = self
            .keys
            .get(keys.inbound)
            .and_then(|k| k.decrypt(ct))
            .map_err(|_| Dropped::AuthFailure)?;
        let stored = if keys.inbound == keys.outbound {
            ct.clone()
        } else {
            let out = self.keys.get_mut(keys.outbound).map_err(|_| Dropped::AuthFailure)?;
            out.encrypt(&self.id, &plaintext).map_err(|_| Dropped::AuthFailure)?
        };
        let (envelope, at) = self.append_for_upload(chain, dest, tx_type, StoredPayload::Sealed(stored), None, now_ms)?;
        Ok(ForwardedStore { envelope, plaintext, at, auth })
    }

    /// Appends a public record (e.g. a broadcast copy) to a device chain
    /// and returns the envelope that syncs it to the remote chain.
    pub fn record_public(
        &mut self,
        chain: &DeviceId,
        dest: Destination,
        record: Record,
        auth: &Authorized,
        now_ms: u64,
    ) -> Result<StoreEnvelope, Dropped> {
        debug_assert_eq!(auth.miner, self.id);
        if let Record::Broadcast(b) = &record {
            self.note_broadcast(b);
        }
        self.append_for_upload(chain, dest, TxType::Store, StoredPayload::Public(record), None, now_ms).map(|(e, _)| e)
    }

    fn append_for_upload(
        &mut self,
        chain: &DeviceId,
        dest: Destination,
        tx_type: TxType,
        payload: StoredPayload,
        signature: Option<Vec<u8>>,
        now_ms: u64,
    ) -> Result<(StoreEnvelope, TxRef), Dropped> {
        let hasher = self.hasher;
        let ledger = self.ledger_mut(chain, dest).ok_or_else(|| Dropped::UnknownChain(chain.clone()))?;
        let mut tx = Transaction::new(ledger.next_link(), chain.clone(), tx_type, payload.to_bytes(), now_ms, hasher);
        tx.signature = signature;
        let at = ledger.append_transaction(tx.clone()).map_err(|_| Dropped::Malformed)?;
        let head = ledger.last_transaction_ref(chain).expect("just appended");
        Ok((
            StoreEnvelope { inner: tx, destination: dest, auth_block_number: head.block_number, auth_tx_digest: head.tx_digest },
            at,
        ))
    }

    /// NGW relay of an envelope from a child miner: policy and rate check
    /// on the relayed device, payload digest check.
    pub fn relay_store(&mut self, from: &PartyId, env: &StoreEnvelope, now_ms: u64) -> Result<Authorized, Dropped> {
        let req = AuthRequest::new(from, env.inner.tx_type, &env.inner.device_id, now_ms);
        let auth = self.admit(PolicySource::Own, &req)?;
        if self.hasher.digest(&env.inner.payload_cipher) != env.inner.payload_digest {
            return Err(Dropped::Malformed);
        }
        Ok(auth)
    }

    /// Storage side: the envelope's authentication fields must equal the
    /// remote chain's head once the inner transaction is appended.
    pub fn authenticate_store_at_rbc(
        &mut self,
        from: &PartyId,
        env: &StoreEnvelope,
        now_ms: u64,
    ) -> Result<StoreAccepted, Dropped> {
        let chain = &env.inner.device_id;
        let dest = env.destination;
        let auth = self.admit(PolicySource::Own, &AuthRequest::new(from, env.inner.tx_type, chain, now_ms))?;
        let hasher = self.hasher;
        let rbc = self.ledger(chain, dest).ok_or_else(|| Dropped::UnknownChain(chain.clone()))?;
        let link = rbc.next_link();
        if env.inner.prev_tx_digest != link.prev_tx_digest
            || env.inner.tx_number != link.tx_number
            || env.auth_block_number != rbc.next_block_number()
            || env.auth_tx_digest != env.inner.digest(hasher)
        {
            return Err(Dropped::Mismatch);
        }
        let payload = StoredPayload::from_bytes(&env.inner.payload_cipher).map_err(|_| Dropped::Malformed)?;
        let plaintext = match &payload {
            StoredPayload::Sealed(ct) => {
                let keys = self.chain_keys(chain, dest).ok_or_else(|| Dropped::UnknownChain(chain.clone()))?;
                if ct.key_id != keys.inbound {
                    return Err(Dropped::AuthFailure);
                }
                Some(self.keys.get(keys.inbound).and_then(|k| k.decrypt(ct)).map_err(|_| Dropped::AuthFailure)?)
            }
            StoredPayload::Public(_) => None,
        };
        let rbc = self.ledger_mut(chain, dest).expect("checked above");
        let at = rbc.append_transaction(env.inner.clone()).map_err(|_| Dropped::Mismatch)?;
        let head = rbc.last_transaction_ref(chain).expect("just appended");
        if let StoredPayload::Public(Record::Broadcast(_)) = payload {
            self.public_index.entry((chain.clone(), dest)).or_default().push(at);
        }
        Ok(StoreAccepted { at, head, plaintext, auth })
    }

    /// Appends a record to the miner's own chain.
    pub fn append_own(&mut self, tx_type: TxType, record: Record, signature: Option<Vec<u8>>, now_ms: u64) -> TxRef {
        if let Record::Broadcast(b) = &record {
            self.note_broadcast(b);
        }
        let id = self.id.clone();
        let (_, at) = self
            .append_for_upload(&id, Destination::Local, tx_type, StoredPayload::Public(record), signature, now_ms)
            .expect("own chain accepts every type");
        at
    }

    fn note_broadcast(&mut self, b: &BroadcastFrame) {
        let bytes = StoredPayload::Public(Record::Broadcast(b.clone())).to_bytes();
        self.broadcasts.entry(b.id).or_insert(BroadcastCopy {
            digest: self.hasher.digest(&bytes),
            origin: b.origin.clone(),
            issued_at_ms: b.issued_at_ms,
        });
    }

    /// Creates an alarm transaction on the own chain and returns it with
    /// the parties it must be delivered to.
    pub fn raise_alarm(&mut self, cause: AlarmCause, subject: &DeviceId, detail: AlarmDetail, now_ms: u64) -> (AlarmFrame, Vec<PartyId>) {
        let frame = AlarmFrame { cause, subject: subject.clone(), raised_by: self.id.clone(), at_ms: now_ms, detail };
        self.append_own(TxType::At, Record::Alarm(frame.clone()), None, now_ms);
        (frame, alarm_routes(self.role, &self.id, cause))
    }

    /// Serves an auditor's read of the broadcast records on a remote chain.
    pub fn serve_audit_read(
        &mut self,
        auditor: &PartyId,
        chain: &DeviceId,
        dest: Destination,
        now_ms: u64,
    ) -> Result<Vec<AuditEntry>, Dropped> {
        self.admit(PolicySource::Own, &AuthRequest::new(auditor, TxType::Access, chain, now_ms))?;
        let ledger = self.ledger(chain, dest).ok_or_else(|| Dropped::UnknownChain(chain.clone()))?;
        let refs: Vec<TxRef> = if ledger.was_tampered() {
            // positions may have moved; rescan
            ledger
                .transactions()
                .filter(|(_, tx)| matches!(tx.payload_cipher.first(), Some(2)) && tx.payload_cipher.get(1) == Some(&4))
                .map(|(r, _)| r)
                .collect()
        } else {
            self.public_index.get(&(chain.clone(), dest)).cloned().unwrap_or_default()
        };
        Ok(refs
            .into_iter()
            .filter_map(|r| ledger.transaction(r))
            .map(|tx| AuditEntry {
                tx_number: tx.tx_number,
                broadcast_id: match StoredPayload::from_bytes(&tx.payload_cipher) {
                    Ok(StoredPayload::Public(Record::Broadcast(b))) => Some(b.id),
                    _ => None,
                },
                payload_digest: self.hasher.digest(&tx.payload_cipher),
            })
            .collect())
    }

    /// Compares a remote chain's broadcast records with this miner's own
    /// copies. `expected` lists ids that must be present.
    pub fn compare_audit(&self, entries: &[AuditEntry], expected: &[u64]) -> AuditOutcome {
        let mut mismatched = BTreeSet::new();
        let mut malformed = 0;
        let mut seen = HashSet::new();
        for e in entries {
            match e.broadcast_id {
                None => malformed += 1,
                Some(id) => {
                    seen.insert(id);
                    match self.broadcasts.get(&id) {
                        Some(copy) if copy.digest == e.payload_digest => {}
                        _ => {
                            mismatched.insert(id);
                        }
                    }
                }
            }
        }
        mismatched.extend(expected.iter().filter(|id| !seen.contains(id)));
        if mismatched.is_empty() && malformed == 0 {
            AuditOutcome::AuditOk
        } else {
            AuditOutcome::AuditMismatch { mismatched: mismatched.into_iter().collect(), malformed }
        }
    }

    /// Invalidates every key of the device, closes its chains with a Remove
    /// transaction and detaches it.
    pub fn remove_device(&mut self, device: &DeviceId, now_ms: u64) -> Result<Removal, MinerError> {
        let chains = self.device_chains.remove(device).ok_or_else(|| MinerError::UnknownDevice(device.clone()))?;
        let mut dropped = BTreeSet::new();
        let mut envelopes = Vec::new();
        for (chain, dest) in &chains {
            if let Some(k) = self.chain_keys.remove(&(chain.clone(), *dest)) {
                dropped.insert(k.inbound);
                dropped.insert(k.outbound);
            }
            // the utility chain admits no Remove; its history simply ends
            if let Ok((env, _)) =
                self.append_for_upload(chain, *dest, TxType::Remove, StoredPayload::Public(Record::Remove), None, now_ms)
            {
                if *dest != Destination::Local {
                    envelopes.push(env);
                }
            }
        }
        dropped.extend(self.keys.iter().filter(|k| k.is_valid() && k.is_held_by(device)).map(|k| k.key_id()));
        let mut controls = Vec::new();
        for k in dropped {
            if let Ok(ctl) = invalidate_key(&mut self.keys, k, &self.id) {
                controls.extend(ctl);
            }
        }
        self.children.remove(device);
        Ok(Removal { controls, envelopes })
    }

    /// Appends a device-originated transaction to a chain this miner holds
    /// without uploading it (HAN access logs).
    pub fn append_local(
        &mut self,
        chain: &DeviceId,
        dest: Destination,
        tx_type: TxType,
        payload: StoredPayload,
        auth: &Authorized,
        now_ms: u64,
    ) -> Result<TxRef, Dropped> {
        debug_assert_eq!(auth.miner, self.id);
        self.append_for_upload(chain, dest, tx_type, payload, None, now_ms).map(|(_, at)| at)
    }

    /// Applies a key control message from the issuing miner.
    pub fn apply_key_control(&mut self, ctl: &KeyControl) {
        let _ = self.keys.invalidate(ctl.key_id);
        self.chain_keys.retain(|_, k| k.inbound != ctl.key_id && k.outbound != ctl.key_id);
    }
}

/// Who receives an alarm: HAN excess goes to the customer and the utility,
/// NAN excess to the utility, audit mismatches to the control center.
pub fn alarm_routes(role: Role, raised_by: &PartyId, cause: AlarmCause) -> Vec<PartyId> {
    let id = |s: &str| DeviceId::new(s).expect("static id");
    match (cause, role) {
        (AlarmCause::AuditMismatch, _) => vec![id(CC)],
        (AlarmCause::ExcessTraffic, Role::Hgw) => vec![customer_of(raised_by), id(UTILITY)],
        (AlarmCause::ExcessTraffic, _) => vec![id(UTILITY)],
    }
}

pub const CC: &str = "cc";
pub const UTILITY: &str = "utility";
pub const CC_STORAGE: &str = "cc-storage";
pub const U_STORAGE: &str = "u-storage";

pub fn customer_of(hgw: &PartyId) -> PartyId {
    DeviceId::new(format!("customer/{hgw}")).expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{sha256, DeviceMatch, LimitDuration};

    fn id(s: &str) -> DeviceId {
        DeviceId::new(s).unwrap()
    }

    struct Net {
        kex: KeyExchange,
        hgw: MinerState,
        ngw: MinerState,
        cc: MinerState,
        u: MinerState,
        sm_keys: KeyTable,
    }

    fn storage_policy(ngw: &str) -> PolicyHeader {
        PolicyHeader::new(vec![
            PolicyRule::allow(id(ngw), TxType::Store, DeviceMatch::Any, 12, LimitDuration::Hourly),
            PolicyRule::allow(id(ngw), TxType::Ebt, DeviceMatch::Any, 4, LimitDuration::Hourly),
            PolicyRule::allow(id(ngw), TxType::Access, DeviceMatch::Any, 1000, LimitDuration::Hourly),
        ])
    }

    fn net(scheme: KeyScheme) -> Net {
        let mut kex = KeyExchange::new(1);
        for p in ["sm-1", "hgw-1", "ngw-1", CC_STORAGE, U_STORAGE, "t-1"] {
            kex.register(&id(p));
        }
        let ngw_policy = PolicyHeader::new(vec![
            PolicyRule::allow(id("hgw-1"), TxType::Store, DeviceMatch::Any, 12, LimitDuration::Hourly),
        ]);
        let mut n = Net {
            kex,
            hgw: MinerState::new(id("hgw-1"), Role::Hgw, PolicyHeader::default(), 0),
            ngw: MinerState::new(id("ngw-1"), Role::Ngw, ngw_policy, 0),
            cc: MinerState::new(id(CC_STORAGE), Role::CcStorage, storage_policy("ngw-1"), 0),
            u: MinerState::new(id(U_STORAGE), Role::UStorage, storage_policy("ngw-1"), 0),
            sm_keys: KeyTable::new(),
        };
        let spec = meter_spec(true);
        let mut ob = Onboarding { kex: &mut n.kex, device_keys: &mut n.sm_keys, scheme, now_ms: 0 };
        n.hgw.add_device(Some(Storages { cc: &mut n.cc, utility: &mut n.u }), &mut ob, &spec).unwrap();
        n
    }

    fn meter_spec(per_class_keys: bool) -> DeviceSpec {
        let (hf, lf) = if per_class_keys { (id("p-hf"), id("p-lf")) } else { (id("sm-1"), id("sm-1")) };
        DeviceSpec::Meter {
            id: id("sm-1"),
            hf_policy: vec![PolicyRule::allow(hf.clone(), TxType::Store, hf.clone(), 4, LimitDuration::Hourly)],
            lf_policy: vec![PolicyRule::allow(lf.clone(), TxType::Store, lf.clone(), 1, LimitDuration::Weekly)],
            hf_chain: hf,
            lf_chain: lf,
            per_class_keys,
        }
    }

    fn sm_encrypt(n: &mut Net, chain_dest: Destination, pt: &[u8]) -> Ciphertext {
        let chain = if chain_dest == Destination::Utility { id("p-lf") } else { id("p-hf") };
        let k = n.hgw.chain_keys(&chain, chain_dest).unwrap().inbound;
        n.sm_keys.get_mut(k).unwrap().encrypt(&id("sm-1"), pt).unwrap()
    }

    fn store(n: &mut Net, t: u64, pt: &[u8]) -> Result<StoreAccepted, Dropped> {
        let ct = sm_encrypt(n, Destination::ControlCenter, pt);
        let fwd = n.hgw.process_store(&id("p-hf"), Destination::ControlCenter, TxType::Store, &ct, t)?;
        n.ngw.relay_store(&id("hgw-1"), &fwd.envelope, t)?;
        n.cc.authenticate_store_at_rbc(&id("ngw-1"), &fwd.envelope, t)
    }

    #[test]
    fn onboarding_meter_scheme_b() {
        let n = net(KeyScheme::B);
        // per-class keys: HFUK and LFUK, each on an LBC and an RBC
        assert_eq!(n.sm_keys.len(), 2);
        for (chain, dest, storage) in [("p-hf", Destination::ControlCenter, &n.cc), ("p-lf", Destination::Utility, &n.u)] {
            let lbc = n.hgw.ledger(&id(chain), dest).unwrap();
            let rbc = storage.ledger(&id(chain), dest).unwrap();
            assert_eq!(lbc.tx_count(), 1);
            assert_eq!(lbc.blocks()[0].transactions, rbc.blocks()[0].transactions);
            let ck = n.hgw.chain_keys(&id(chain), dest).unwrap();
            let payload = StoredPayload::from_bytes(&lbc.blocks()[0].transactions[0].payload_cipher).unwrap();
            assert_eq!(payload, StoredPayload::Public(Record::Genesis { key_ids: vec![ck.inbound] }));
        }
        let hf = n.hgw.chain_keys(&id("p-hf"), Destination::ControlCenter).unwrap().inbound;
        let lf = n.hgw.chain_keys(&id("p-lf"), Destination::Utility).unwrap().inbound;
        assert_ne!(hf, lf);
        assert_eq!(n.sm_keys.get(hf).unwrap().data_class(), DataClass::HighFreq);
    }

    #[test]
    fn re_add_rejected() {
        let mut n = net(KeyScheme::B);
        let mut ob = Onboarding { kex: &mut n.kex, device_keys: &mut n.sm_keys, scheme: KeyScheme::B, now_ms: 5 };
        let err = n.hgw.add_device(Some(Storages { cc: &mut n.cc, utility: &mut n.u }), &mut ob, &meter_spec(true));
        assert!(matches!(err, Err(MinerError::AlreadyOnboarded(_))));
    }

    #[test]
    fn han_device_local_only() {
        let mut n = net(KeyScheme::B);
        let mut keys = KeyTable::new();
        let mut ob = Onboarding { kex: &mut n.kex, device_keys: &mut keys, scheme: KeyScheme::B, now_ms: 0 };
        let r = n.hgw.add_device(None, &mut ob, &DeviceSpec::HanDevice { id: id("t-1"), policy: vec![] }).unwrap();
        assert_eq!(r.appends, vec![(id("hgw-1"), id("t-1"), Destination::Local)]);
        assert_eq!(r.keys[0].holders().len(), 2);
    }

    #[test]
    fn honest_store_keeps_chains_in_sync() {
        for scheme in [KeyScheme::A, KeyScheme::B] {
            let mut n = net(scheme);
            for i in 1..=4u64 {
                let acc = store(&mut n, i * 900_000, format!("r{i}").as_bytes()).unwrap();
                assert_eq!(acc.plaintext.as_deref(), Some(format!("r{i}").as_bytes()));
                let lbc = n.hgw.ledger(&id("p-hf"), Destination::ControlCenter).unwrap();
                assert_eq!(lbc.last_transaction_ref(&id("p-hf")).unwrap(), acc.head);
            }
            let lbc = n.hgw.ledger(&id("p-hf"), Destination::ControlCenter).unwrap();
            let rbc = n.cc.ledger(&id("p-hf"), Destination::ControlCenter).unwrap();
            assert_eq!(lbc.blocks(), rbc.blocks());
        }
    }

    #[test]
    fn auth_fields_are_head_after_append() {
        let mut n = net(KeyScheme::B);
        let ct = sm_encrypt(&mut n, Destination::ControlCenter, b"x");
        let fwd = n.hgw.process_store(&id("p-hf"), Destination::ControlCenter, TxType::Store, &ct, 1).unwrap();
        let lbc = n.hgw.ledger(&id("p-hf"), Destination::ControlCenter).unwrap();
        // oracle: digest of the canonical bytes of the second transaction
        let tx = &lbc.blocks()[0].transactions[1];
        assert_eq!(fwd.envelope.auth_tx_digest, sha256(&tx.to_bytes()));
        assert_eq!(fwd.envelope.auth_block_number, 0);
    }

    #[test]
    fn fifth_hf_store_dropped_with_one_alarm_trigger() {
        let mut n = net(KeyScheme::B);
        for i in 0..4 {
            store(&mut n, 1000 + i, b"ok").unwrap();
        }
        let ct = sm_encrypt(&mut n, Destination::ControlCenter, b"x");
        let r = n.hgw.process_store(&id("p-hf"), Destination::ControlCenter, TxType::Store, &ct, 2000);
        assert_eq!(r.unwrap_err(), Dropped::Exceeded { count: 5, window_start_ms: 0, first: true });
        let ct = sm_encrypt(&mut n, Destination::ControlCenter, b"x");
        let r = n.hgw.process_store(&id("p-hf"), Destination::ControlCenter, TxType::Store, &ct, 2001);
        assert!(matches!(r, Err(Dropped::Exceeded { first: false, .. })));
        assert_eq!(n.hgw.ledger(&id("p-hf"), Destination::ControlCenter).unwrap().tx_count(), 5);
    }

    #[test]
    fn tampered_ciphertext_not_appended() {
        let mut n = net(KeyScheme::B);
        let mut ct = sm_encrypt(&mut n, Destination::ControlCenter, b"reading");
        ct.body[2] ^= 4;
        let r = n.hgw.process_store(&id("p-hf"), Destination::ControlCenter, TxType::Store, &ct, 1);
        assert_eq!(r.unwrap_err(), Dropped::AuthFailure);
        assert_eq!(n.hgw.ledger(&id("p-hf"), Destination::ControlCenter).unwrap().tx_count(), 1);
    }

    #[test]
    fn rbc_tamper_rejects_next_store() {
        let mut n = net(KeyScheme::B);
        store(&mut n, 1, b"a").unwrap();
        n.cc.ledger_mut(&id("p-hf"), Destination::ControlCenter)
            .unwrap()
            .tamper(|b| *b[0].transactions[1].payload_cipher.last_mut().unwrap() ^= 1);
        assert_eq!(store(&mut n, 2, b"b").unwrap_err(), Dropped::Mismatch);
    }

    #[test]
    fn rbc_deletion_rejects_next_store() {
        let mut n = net(KeyScheme::B);
        store(&mut n, 1, b"a").unwrap();
        n.cc.ledger_mut(&id("p-hf"), Destination::ControlCenter).unwrap().tamper(|b| b[0].transactions.pop());
        assert_eq!(store(&mut n, 2, b"b").unwrap_err(), Dropped::Mismatch);
    }

    #[test]
    fn replayed_envelope_rejected() {
        let mut n = net(KeyScheme::B);
        let ct = sm_encrypt(&mut n, Destination::ControlCenter, b"a");
        let fwd = n.hgw.process_store(&id("p-hf"), Destination::ControlCenter, TxType::Store, &ct, 1).unwrap();
        n.cc.authenticate_store_at_rbc(&id("ngw-1"), &fwd.envelope, 1).unwrap();
        let rbc_before = n.cc.ledger(&id("p-hf"), Destination::ControlCenter).unwrap().tx_count();
        assert_eq!(n.cc.authenticate_store_at_rbc(&id("ngw-1"), &fwd.envelope, 2).unwrap_err(), Dropped::Mismatch);
        assert_eq!(n.cc.ledger(&id("p-hf"), Destination::ControlCenter).unwrap().tx_count(), rbc_before);
    }

    #[test]
    fn unknown_relayer_denied() {
        let mut n = net(KeyScheme::B);
        let ct = sm_encrypt(&mut n, Destination::ControlCenter, b"a");
        let fwd = n.hgw.process_store(&id("p-hf"), Destination::ControlCenter, TxType::Store, &ct, 1).unwrap();
        assert_eq!(n.ngw.relay_store(&id("hgw-9"), &fwd.envelope, 1).unwrap_err(), Dropped::Denied(DenyReason::NoRule));
        assert!(matches!(n.cc.authenticate_store_at_rbc(&id("ngw-9"), &fwd.envelope, 1), Err(Dropped::Denied(_))));
    }

    #[test]
    fn broadcast_audit_detects_consistent_dual_tamper() {
        let mut n = net(KeyScheme::B);
        let frame = BroadcastFrame { id: 1, origin: id("utility"), kind: BroadcastKind::Pricing, issued_at_ms: 10, body: b"0.21".to_vec() };
        let ngw_auth = n.ngw.admit(PolicySource::Own, &AuthRequest::new(&id("hgw-1"), TxType::Store, &id("x"), 10)).unwrap();
        let _ = ngw_auth;
        n.ngw.append_own(TxType::Store, Record::Broadcast(frame.clone()), None, 10);
        let hgw_rule = PolicyRule::allow(id("utility"), TxType::Store, DeviceMatch::Any, 24, LimitDuration::Daily);
        n.hgw.set_policy(hgw_rule).unwrap();
        let auth = n.hgw.admit(PolicySource::Own, &AuthRequest::new(&id("utility"), TxType::Store, &id("p-lf"), 10)).unwrap();
        let env = n.hgw.record_public(&id("p-lf"), Destination::Utility, Record::Broadcast(frame.clone()), &auth, 10).unwrap();
        n.u.authenticate_store_at_rbc(&id("ngw-1"), &env, 11).unwrap();

        let read = n.u.serve_audit_read(&id("ngw-1"), &id("p-lf"), Destination::Utility, 20).unwrap();
        assert_eq!(n.ngw.compare_audit(&read, &[1]), AuditOutcome::AuditOk);

        // rewrite the price in both copies and fix the payload digests
        let forged = StoredPayload::Public(Record::Broadcast(BroadcastFrame { body: b"9.99".to_vec(), ..frame })).to_bytes();
        let dg = sha256(&forged);
        for l in [
            n.hgw.ledger_mut(&id("p-lf"), Destination::Utility).unwrap(),
            n.u.ledger_mut(&id("p-lf"), Destination::Utility).unwrap(),
        ] {
            l.tamper(|b| {
                let tx = &mut b[0].transactions[1];
                tx.payload_cipher = forged.clone();
                tx.payload_digest = dg;
            });
        }
        let lbc_head = n.hgw.ledger(&id("p-lf"), Destination::Utility).unwrap().last_transaction_ref(&id("p-lf")).unwrap();
        let rbc_head = n.u.ledger(&id("p-lf"), Destination::Utility).unwrap().last_transaction_ref(&id("p-lf")).unwrap();
        assert_eq!(lbc_head, rbc_head, "sync check cannot see a consistent dual tamper");

        let read = n.u.serve_audit_read(&id("ngw-1"), &id("p-lf"), Destination::Utility, 30).unwrap();
        assert_eq!(n.ngw.compare_audit(&read, &[1]), AuditOutcome::AuditMismatch { mismatched: vec![1], malformed: 0 });
        // a missing expected id also counts
        assert_eq!(n.ngw.compare_audit(&[], &[1]), AuditOutcome::AuditMismatch { mismatched: vec![1], malformed: 0 });
    }

    #[test]
    fn alarms_are_logged_and_routed() {
        let mut n = net(KeyScheme::B);
        let before = n.hgw.own_chain().tx_count();
        let detail = AlarmDetail::Excess { tx_type: TxType::Store, window_start_ms: 0, count: 5 };
        let (_, routes) = n.hgw.raise_alarm(AlarmCause::ExcessTraffic, &id("p-hf"), detail.clone(), 5);
        assert_eq!(routes, vec![id("customer/hgw-1"), id(UTILITY)]);
        assert_eq!(n.hgw.own_chain().tx_count(), before + 1);
        let (_, routes) = n.ngw.raise_alarm(AlarmCause::ExcessTraffic, &id("hgw-1"), detail, 5);
        assert_eq!(routes, vec![id(UTILITY)]);
        let (_, routes) = n.ngw.raise_alarm(AlarmCause::AuditMismatch, &id("p-hf"), AlarmDetail::Audit { mismatched: vec![3] }, 5);
        assert_eq!(routes, vec![id(CC)]);
        assert!(n.ngw.own_chain().validate_chain().is_ok());
    }

    #[test]
    fn remove_then_re_add() {
        let mut n = net(KeyScheme::B);
        store(&mut n, 1, b"a").unwrap();
        let removal = n.hgw.remove_device(&id("sm-1"), 10).unwrap();
        // only the control-center chain admits Remove
        assert_eq!(removal.envelopes.len(), 1);
        assert_eq!(removal.envelopes[0].destination, Destination::ControlCenter);
        let ctl = removal.controls;
        // two keys, each with a meter and a storage holder besides the HGW
        assert_eq!(ctl.len(), 4);
        assert!(ctl.iter().all(|c| !n.hgw.keys.is_valid(c.key_id)));
        for c in &ctl {
            match c.to.as_str() {
                CC_STORAGE => n.cc.apply_key_control(c),
                U_STORAGE => n.u.apply_key_control(c),
                _ => {}
            }
        }
        let ct = Ciphertext { key_id: ctl[0].key_id, nonce: [0; 12], body: vec![], tag: [0; 16] };
        assert!(n.hgw.process_store(&id("p-hf"), Destination::ControlCenter, TxType::Store, &ct, 11).is_err());
        let lbc = n.hgw.ledger(&id("p-hf"), Destination::ControlCenter).unwrap();
        assert_eq!(lbc.transactions().last().unwrap().1.tx_type, TxType::Remove);
        assert!(matches!(n.hgw.remove_device(&id("sm-1"), 12), Err(MinerError::UnknownDevice(_))));

        let mut fresh = KeyTable::new();
        let mut ob = Onboarding { kex: &mut n.kex, device_keys: &mut fresh, scheme: KeyScheme::B, now_ms: 20 };
        n.hgw.add_device(Some(Storages { cc: &mut n.cc, utility: &mut n.u }), &mut ob, &meter_spec(true)).unwrap();
        assert_eq!(n.hgw.ledger(&id("p-hf"), Destination::ControlCenter).unwrap().tx_count(), 1);
        assert_eq!(n.hgw.retired().len(), 2);
    }

    #[test]
    fn record_round_trip() {
        let records = vec![
            Record::Genesis { key_ids: vec![KeyId(1), KeyId(2)] },
            Record::Reading { at_ms: 5, register_wh: 77 },
            Record::Event { at_ms: 9, event: GridEvent::PowerOutage },
            Record::Broadcast(BroadcastFrame { id: 3, origin: id("cc"), kind: BroadcastKind::Drms, issued_at_ms: 4, body: vec![1, 2] }),
            Record::Alarm(AlarmFrame {
                cause: AlarmCause::AuditMismatch,
                subject: id("x"),
                raised_by: id("ngw"),
                at_ms: 3,
                detail: AlarmDetail::Audit { mismatched: vec![1, 4] },
            }),
            Record::Otft { request_id: 1, target: id("sm"), register_wh: Some(8) },
            Record::Ct { request_id: 2, target: id("ac"), command: Switch::On },
            Record::Remove,
            Record::Sample { at_ms: 1, value: -4 },
        ];
        for r in records {
            assert_eq!(Record::from_bytes(&r.to_bytes()).unwrap(), r);
            let p = StoredPayload::Public(r);
            assert_eq!(StoredPayload::from_bytes(&p.to_bytes()).unwrap(), p);
        }
    }
}
