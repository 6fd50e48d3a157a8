//! Tamper-evident per-device chains.
//!
//! A [`Ledger`] is an append-only list of [`Block`]s owned by a single
//! device (or a pseudonymous per-data-class identity of one). Every block
//! carries two headers: the block header, holding the digest of the
//! previous block, and a [`PolicyHeader`] with the authorization rules in
//! force while the block is the tail. Transactions of the owner are linked
//! to each other through `prev_tx_digest` across block boundaries.

mod chain;
pub mod codec;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;
use thiserror::Error;

pub use chain::{ChainBreak, ChainFault, Ledger, TxHead, TxRef};
use codec::{DecodeError, Decoder, Encoder};

pub const DIGEST_LEN: usize = 32;

/// Default number of transactions per block.
pub const DEFAULT_BLOCK_CAPACITY: usize = 10;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub const fn from_bytes(bytes: [u8; DIGEST_LEN]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0; DIGEST_LEN]
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First eight bytes as hex, for log lines.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..8])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; DIGEST_LEN];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Digest(out))
    }
}

/// The digest primitive. Any 32-byte function can be plugged in; the
/// default is SHA-256.
#[derive(Clone, Copy)]
pub struct Hasher(fn(&[u8]) -> Digest);

impl Hasher {
    pub const fn new(f: fn(&[u8]) -> Digest) -> Self {
        Hasher(f)
    }

    pub fn sha256() -> Self {
        Hasher(sha256)
    }

    pub fn digest(&self, data: &[u8]) -> Digest {
        (self.0)(data)
    }
}

impl Default for Hasher {
    fn default() -> Self {
        Self::sha256()
    }
}

impl fmt::Debug for Hasher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Hasher")
    }
}

pub fn sha256(data: &[u8]) -> Digest {
    use sha2::Digest as _;
    Digest(Sha256::digest(data).into())
}

/// Opaque identifier of a device, miner or other addressable party.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceId(Arc<str>);

/// Any addressable participant: devices, miners, the control center.
pub type PartyId = DeviceId;

impl DeviceId {
    pub fn new(id: impl AsRef<str>) -> Result<Self, LedgerError> {
        let id = id.as_ref();
        if id.is_empty() {
            return Err(LedgerError::EmptyDeviceId);
        }
        Ok(DeviceId(Arc::from(id)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for DeviceId {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DeviceId::new(s)
    }
}

impl AsRef<str> for DeviceId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for DeviceId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for DeviceId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        DeviceId::new(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxType {
    Genesis,
    Store,
    Access,
    /// Tag only; no flow produces it.
    Monitor,
    Remove,
    #[serde(rename = "EBT")]
    Ebt,
    #[serde(rename = "OTFT")]
    Otft,
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "AT")]
    At,
}

impl TxType {
    pub const ALL: [TxType; 9] = [
        TxType::Genesis,
        TxType::Store,
        TxType::Access,
        TxType::Monitor,
        TxType::Remove,
        TxType::Ebt,
        TxType::Otft,
        TxType::Ct,
        TxType::At,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        TxType::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TxType::Genesis => "Genesis",
            TxType::Store => "Store",
            TxType::Access => "Access",
            TxType::Monitor => "Monitor",
            TxType::Remove => "Remove",
            TxType::Ebt => "EBT",
            TxType::Otft => "OTFT",
            TxType::Ct => "CT",
            TxType::At => "AT",
        }
    }
}

impl fmt::Display for TxType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the remote copy of a chain lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Local,
    #[serde(rename = "cc")]
    ControlCenter,
    Utility,
}

impl Destination {
    /// Transaction types admitted by a chain with this destination.
    /// Genesis is admitted separately as the first entry of every chain.
    pub fn allowed_types(self) -> BTreeSet<TxType> {
        match self {
            Destination::Utility => [TxType::Store, TxType::Access].into_iter().collect(),
            Destination::Local | Destination::ControlCenter => TxType::ALL.into_iter().collect(),
        }
    }
}

/// One ledger entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub prev_tx_digest: Digest,
    pub tx_number: u64,
    pub device_id: DeviceId,
    pub tx_type: TxType,
    /// Requester signature for multisig transactions.
    pub signature: Option<Vec<u8>>,
    pub payload_cipher: Vec<u8>,
    pub payload_digest: Digest,
    pub timestamp_ms: u64,
}

impl Transaction {
    /// Builds a transaction and fills `payload_digest`.
    pub fn new(
        link: ChainLink,
        device_id: DeviceId,
        tx_type: TxType,
        payload_cipher: Vec<u8>,
        timestamp_ms: u64,
        hasher: Hasher,
    ) -> Self {
        let payload_digest = hasher.digest(&payload_cipher);
        Transaction {
            prev_tx_digest: link.prev_tx_digest,
            tx_number: link.tx_number,
            device_id,
            tx_type,
            signature: None,
            payload_cipher,
            payload_digest,
            timestamp_ms,
        }
    }

    pub fn genesis(device_id: DeviceId, payload: Vec<u8>, timestamp_ms: u64, hasher: Hasher) -> Self {
        Self::new(ChainLink::GENESIS, device_id, TxType::Genesis, payload, timestamp_ms, hasher)
    }

    pub fn with_signature(mut self, signature: Vec<u8>) -> Self {
        self.signature = Some(signature);
        self
    }

    pub fn encode_into(&self, e: &mut Encoder) {
        self.encode_linked(&self.prev_tx_digest, e);
    }

    /// Encoding with `prev` substituted for the stored link field.
    fn encode_linked(&self, prev: &Digest, e: &mut Encoder) {
        e.raw(prev.as_bytes())
            .u64(self.tx_number)
            .str(self.device_id.as_str())
            .u8(self.tx_type.code());
        match &self.signature {
            None => e.u8(0),
            Some(sig) => e.u8(1).bytes(sig),
        };
        e.bytes(&self.payload_cipher)
            .raw(self.payload_digest.as_bytes())
            .u64(self.timestamp_ms);
    }

    /// Body bytes covered by a requester signature (everything except the
    /// signature itself).
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_capacity(96 + self.payload_cipher.len());
        e.raw(self.prev_tx_digest.as_bytes())
            .u64(self.tx_number)
            .str(self.device_id.as_str())
            .u8(self.tx_type.code())
            .bytes(&self.payload_cipher)
            .raw(self.payload_digest.as_bytes())
            .u64(self.timestamp_ms);
        e.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_capacity(128 + self.payload_cipher.len());
        self.encode_into(&mut e);
        e.finish()
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let prev_tx_digest = Digest(d.array()?);
        let tx_number = d.u64()?;
        let device_id = DeviceId::new(d.string("device_id")?).map_err(|_| DecodeError::EmptyId)?;
        let offset = d.position();
        let code = d.u8()?;
        let tx_type = TxType::from_code(code).ok_or(DecodeError::BadTag {
            what: "tx_type",
            tag: code,
            offset,
        })?;
        let signature = if d.bool("signature tag")? { Some(d.bytes()?.to_vec()) } else { None };
        let payload_cipher = d.bytes()?.to_vec();
        let payload_digest = Digest(d.array()?);
        let timestamp_ms = d.u64()?;
        Ok(Transaction {
            prev_tx_digest,
            tx_number,
            device_id,
            tx_type,
            signature,
            payload_cipher,
            payload_digest,
            timestamp_ms,
        })
    }

    pub fn digest(&self, hasher: Hasher) -> Digest {
        self.digest_linked(&self.prev_tx_digest, hasher)
    }

    /// Digest of this transaction as if its link field held `prev`.
    /// Chain walks use this with the *recomputed* predecessor digest, so a
    /// change anywhere upstream surfaces at the head.
    pub fn digest_linked(&self, prev: &Digest, hasher: Hasher) -> Digest {
        let mut e = Encoder::with_capacity(128 + self.payload_cipher.len());
        self.encode_linked(prev, &mut e);
        hasher.digest(e.as_slice())
    }
}

/// Link fields for the next transaction of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainLink {
    pub prev_tx_digest: Digest,
    pub tx_number: u64,
}

impl ChainLink {
    pub const GENESIS: ChainLink = ChainLink { prev_tx_digest: Digest::ZERO, tx_number: 0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitDuration {
    Hourly,
    Daily,
    Weekly,
    Monthly,
}

impl LimitDuration {
    pub const fn window_ms(self) -> u64 {
        const HOUR: u64 = 3_600_000;
        match self {
            LimitDuration::Hourly => HOUR,
            LimitDuration::Daily => 24 * HOUR,
            LimitDuration::Weekly => 7 * 24 * HOUR,
            LimitDuration::Monthly => 30 * 24 * HOUR,
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        [Self::Hourly, Self::Daily, Self::Weekly, Self::Monthly].get(code as usize).copied()
    }
}

/// Device column of a policy rule: a concrete id or `*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DeviceMatch {
    Any,
    Exact(DeviceId),
}

impl DeviceMatch {
    pub fn matches(&self, device: &DeviceId) -> bool {
        match self {
            DeviceMatch::Any => true,
            DeviceMatch::Exact(id) => id == device,
        }
    }
}

impl From<DeviceId> for DeviceMatch {
    fn from(id: DeviceId) -> Self {
        DeviceMatch::Exact(id)
    }
}

impl fmt::Display for DeviceMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceMatch::Any => f.write_str("*"),
            DeviceMatch::Exact(id) => f.write_str(id.as_str()),
        }
    }
}

impl Serialize for DeviceMatch {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DeviceMatch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "*" {
            Ok(DeviceMatch::Any)
        } else {
            DeviceId::new(s).map(DeviceMatch::Exact).map_err(serde::de::Error::custom)
        }
    }
}

/// One row of a policy header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub requester: PartyId,
    pub request_type: TxType,
    pub device_id: DeviceMatch,
    pub action: Action,
    pub tx_limit: u32,
    pub limit_duration: LimitDuration,
}

impl PolicyRule {
    pub fn allow(
        requester: PartyId,
        request_type: TxType,
        device_id: impl Into<DeviceMatch>,
        tx_limit: u32,
        limit_duration: LimitDuration,
    ) -> Self {
        PolicyRule {
            requester,
            request_type,
            device_id: device_id.into(),
            action: Action::Allow,
            tx_limit,
            limit_duration,
        }
    }

    pub fn deny(requester: PartyId, request_type: TxType, device_id: impl Into<DeviceMatch>) -> Self {
        PolicyRule {
            requester,
            request_type,
            device_id: device_id.into(),
            action: Action::Deny,
            tx_limit: 0,
            limit_duration: LimitDuration::Hourly,
        }
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        if self.action == Action::Allow && self.tx_limit == 0 {
            return Err(LedgerError::InvalidRule("allow rule needs tx_limit >= 1".into()));
        }
        Ok(())
    }

    fn same_subject(&self, other: &PolicyRule) -> bool {
        self.requester == other.requester
            && self.request_type == other.request_type
            && self.device_id == other.device_id
    }

    fn encode_into(&self, e: &mut Encoder) {
        e.str(self.requester.as_str()).u8(self.request_type.code());
        match &self.device_id {
            DeviceMatch::Any => e.u8(0),
            DeviceMatch::Exact(id) => e.u8(1).str(id.as_str()),
        };
        e.u8(matches!(self.action, Action::Allow) as u8)
            .u32(self.tx_limit)
            .u8(self.limit_duration.code());
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let requester = DeviceId::new(d.string("requester")?).map_err(|_| DecodeError::EmptyId)?;
        let offset = d.position();
        let code = d.u8()?;
        let request_type = TxType::from_code(code).ok_or(DecodeError::BadTag {
            what: "request_type",
            tag: code,
            offset,
        })?;
        let device_id = if d.bool("device match")? {
            DeviceMatch::Exact(DeviceId::new(d.string("device")?).map_err(|_| DecodeError::EmptyId)?)
        } else {
            DeviceMatch::Any
        };
        let action = if d.bool("action")? { Action::Allow } else { Action::Deny };
        let tx_limit = d.u32()?;
        let offset = d.position();
        let code = d.u8()?;
        let limit_duration = LimitDuration::from_code(code).ok_or(DecodeError::BadTag {
            what: "limit_duration",
            tag: code,
            offset,
        })?;
        Ok(PolicyRule { requester, request_type, device_id, action, tx_limit, limit_duration })
    }
}

/// Ordered rule list; first match wins and anything unmatched is denied.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyHeader {
    pub rules: Vec<PolicyRule>,
}

impl PolicyHeader {
    pub fn new(rules: Vec<PolicyRule>) -> Self {
        PolicyHeader { rules }
    }

    pub const fn default_action(&self) -> Action {
        Action::Deny
    }

    /// Replaces the rule with the same (requester, type, device) or appends.
    pub fn upsert(&mut self, rule: PolicyRule) {
        match self.rules.iter_mut().find(|r| r.same_subject(&rule)) {
            Some(slot) => *slot = rule,
            None => self.rules.push(rule),
        }
    }

    fn encode_into(&self, e: &mut Encoder) {
        e.u32(self.rules.len() as u32);
        for rule in &self.rules {
            rule.encode_into(e);
        }
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let n = d.u32()? as usize;
        let mut rules = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            rules.push(PolicyRule::decode_from(d)?);
        }
        Ok(PolicyHeader { rules })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub block_number: u64,
    pub prev_block_digest: Digest,
    pub policy_header: PolicyHeader,
    pub transactions: Vec<Transaction>,
    pub sealed: bool,
}

impl Block {
    pub fn open(block_number: u64, prev_block_digest: Digest, policy_header: PolicyHeader) -> Self {
        Block { block_number, prev_block_digest, policy_header, transactions: Vec::new(), sealed: false }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_capacity(256 + self.transactions.len() * 256);
        e.u64(self.block_number).raw(self.prev_block_digest.as_bytes());
        self.policy_header.encode_into(&mut e);
        e.u32(self.transactions.len() as u32);
        for tx in &self.transactions {
            tx.encode_into(&mut e);
        }
        e.u8(self.sealed as u8);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let block_number = d.u64()?;
        let prev_block_digest = Digest(d.array()?);
        let policy_header = PolicyHeader::decode_from(&mut d)?;
        let n = d.u32()? as usize;
        let mut transactions = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            transactions.push(Transaction::decode_from(&mut d)?);
        }
        let sealed = d.bool("sealed")?;
        d.finish()?;
        Ok(Block { block_number, prev_block_digest, policy_header, transactions, sealed })
    }

    pub fn digest(&self, hasher: Hasher) -> Digest {
        hasher.digest(&self.to_bytes())
    }
}

/// Who is editing a policy header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    HomeOwner,
    Utility,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("chain link mismatch: expected tx #{expected_number} after {expected_prev:?}, got #{got_number}")]
    ChainLinkMismatch { expected_number: u64, expected_prev: Digest, got_number: u64 },
    #[error("transaction type {0} not allowed on this ledger")]
    TypeNotAllowed(TxType),
    #[error("transaction from {got} does not belong to ledger of {owner}")]
    WrongOwner { owner: DeviceId, got: DeviceId },
    #[error("first transaction of a chain must be its genesis")]
    MissingGenesis,
    #[error("payload digest does not match payload bytes")]
    PayloadDigestMismatch,
    #[error("tail block has no transactions")]
    EmptyBlock,
    #[error("ledger is empty")]
    EmptyLedger,
    #[error("policy update denied for {actor:?} on {device}")]
    Denied { actor: Actor, device: DeviceMatch },
    #[error("invalid policy rule: {0}")]
    InvalidRule(String),
    #[error("device id must be non-empty")]
    EmptyDeviceId,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(s: &str) -> DeviceId {
        DeviceId::new(s).unwrap()
    }

    #[test]
    fn tx_type_codes_round_trip() {
        for t in TxType::ALL {
            assert_eq!(TxType::from_code(t.code()), Some(t));
        }
        assert_eq!(TxType::from_code(9), None);
    }

    #[test]
    fn utility_chains_only_admit_store_and_access() {
        let allowed = Destination::Utility.allowed_types();
        assert_eq!(allowed.len(), 2);
        assert!(allowed.contains(&TxType::Store) && allowed.contains(&TxType::Access));
        assert_eq!(Destination::ControlCenter.allowed_types().len(), TxType::ALL.len());
    }

    #[test]
    fn empty_device_id_rejected() {
        assert_eq!(DeviceId::new(""), Err(LedgerError::EmptyDeviceId));
    }

    #[test]
    fn allow_rule_needs_positive_limit() {
        let mut r = PolicyRule::allow(dev("cc"), TxType::Otft, DeviceMatch::Any, 4, LimitDuration::Hourly);
        assert!(r.validate().is_ok());
        r.tx_limit = 0;
        assert!(r.validate().is_err());
        assert!(PolicyRule::deny(dev("x"), TxType::Store, DeviceMatch::Any).validate().is_ok());
    }

    #[test]
    fn block_bytes_round_trip() {
        let h = Hasher::default();
        let mut block = Block::open(
            3,
            sha256(b"prev"),
            PolicyHeader::new(vec![PolicyRule::allow(
                dev("cc"),
                TxType::Ct,
                dev("ac-1"),
                4,
                LimitDuration::Daily,
            )]),
        );
        let tx = Transaction::genesis(dev("sm-1"), b"hello".to_vec(), 7, h).with_signature(vec![1, 2]);
        block.transactions.push(tx);
        block.sealed = true;
        let bytes = block.to_bytes();
        assert_eq!(Block::from_bytes(&bytes).unwrap(), block);
        assert_eq!(Block::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn window_lengths() {
        assert_eq!(LimitDuration::Hourly.window_ms(), 3_600_000);
        assert_eq!(LimitDuration::Daily.window_ms(), 86_400_000);
        assert_eq!(LimitDuration::Weekly.window_ms(), 604_800_000);
        assert_eq!(LimitDuration::Monthly.window_ms(), 2_592_000_000);
    }
}
