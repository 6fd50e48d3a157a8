//! Shared keys: establishment, lookup, invalidation and use.
//!
//! Key agreement is simulated. Every participant contributes a random share
//! drawn from the seeded exchange RNG; all ends hash the same transcript and
//! so derive the same 32 key bytes. Payloads are sealed with
//! ChaCha20-Poly1305 and signatures are HMAC-SHA256.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::ledger::codec::{DecodeError, Decoder, Encoder};
use crate::ledger::{DeviceId, PartyId, PolicyHeader, TxType};
use crate::policy::{authorize, AuthRequest, Decision};

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("unknown party {0}")]
    PartyUnknown(PartyId),
    #[error("a valid key is already bound to this slot ({0})")]
    KeyAlreadyBound(KeyId),
    #[error("unknown key {0}")]
    UnknownKey(KeyId),
    #[error("key {0} has been invalidated")]
    KeyInvalid(KeyId),
    #[error("authentication failed")]
    AuthFailure,
    #[error("request denied by policy")]
    Denied,
    #[error("malformed ciphertext: {0}")]
    Malformed(#[from] DecodeError),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyId(pub u64);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{:06}", self.0)
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// What a key may protect. Low- and high-frequency meter data never share
/// a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataClass {
    Generic,
    LowFreq,
    HighFreq,
}

/// Identifies what a key is for: who holds it, what class, and which
/// device's data it covers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeySlot {
    pub holders: BTreeSet<PartyId>,
    pub class: DataClass,
    pub subject: DeviceId,
}

impl KeySlot {
    pub fn new<'a>(holders: impl IntoIterator<Item = &'a PartyId>, class: DataClass, subject: &DeviceId) -> Self {
        KeySlot { holders: holders.into_iter().cloned().collect(), class, subject: subject.clone() }
    }
}

#[derive(Clone)]
pub struct SharedKey {
    key_id: KeyId,
    key_bytes: [u8; KEY_LEN],
    slot: KeySlot,
    valid: bool,
    nonce_counter: u64,
}

impl fmt::Debug for SharedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SharedKey")
            .field("key_id", &self.key_id)
            .field("key_bytes", &"<redacted>")
            .field("holders", &self.slot.holders)
            .field("class", &self.slot.class)
            .field("subject", &self.slot.subject)
            .field("valid", &self.valid)
            .finish()
    }
}

impl SharedKey {
    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn key_bytes(&self) -> &[u8; KEY_LEN] {
        &self.key_bytes
    }

    pub fn slot(&self) -> &KeySlot {
        &self.slot
    }

    pub fn holders(&self) -> &BTreeSet<PartyId> {
        &self.slot.holders
    }

    pub fn data_class(&self) -> DataClass {
        self.slot.class
    }

    pub fn subject(&self) -> &DeviceId {
        &self.slot.subject
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn is_held_by(&self, party: &PartyId) -> bool {
        self.slot.holders.contains(party)
    }

    fn ensure_valid(&self) -> Result<(), KeyError> {
        if self.valid {
            Ok(())
        } else {
            Err(KeyError::KeyInvalid(self.key_id))
        }
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.key_bytes))
    }

    fn aad(&self) -> [u8; 8] {
        self.key_id.0.to_le_bytes()
    }

    /// Nonce = 4-byte sender tag followed by this key's 8-byte counter, so
    /// two holders encrypting under one key never collide.
    pub fn encrypt(&mut self, sender: &PartyId, plaintext: &[u8]) -> Result<Ciphertext, KeyError> {
        self.ensure_valid()?;
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..4].copy_from_slice(&Sha256::digest(sender.as_str().as_bytes())[..4]);
        nonce[4..].copy_from_slice(&self.nonce_counter.to_le_bytes());
        self.nonce_counter += 1;
        let mut sealed = self
            .cipher()
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: &self.aad() })
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
        let tag_at = sealed.len() - TAG_LEN;
        let tag: [u8; TAG_LEN] = sealed[tag_at..].try_into().expect("tag length");
        sealed.truncate(tag_at);
        Ok(Ciphertext { key_id: self.key_id, nonce, body: sealed, tag })
    }

    pub fn decrypt(&self, ct: &Ciphertext) -> Result<Vec<u8>, KeyError> {
        self.ensure_valid()?;
        if ct.key_id != self.key_id {
            return Err(KeyError::AuthFailure);
        }
        let mut sealed = Vec::with_capacity(ct.body.len() + TAG_LEN);
        sealed.extend_from_slice(&ct.body);
        sealed.extend_from_slice(&ct.tag);
        self.cipher()
            .decrypt(Nonce::from_slice(&ct.nonce), Payload { msg: &sealed, aad: &self.aad() })
            .map_err(|_| KeyError::AuthFailure)
    }

    fn mac(&self) -> Hmac<Sha256> {
        <Hmac<Sha256> as Mac>::new_from_slice(&self.key_bytes).expect("hmac accepts any key length")
    }

    pub fn sign(&self, msg: &[u8]) -> Result<Vec<u8>, KeyError> {
        self.ensure_valid()?;
        let mut mac = self.mac();
        mac.update(msg);
        Ok(mac.finalize().into_bytes().to_vec())
    }

    pub fn verify(&self, msg: &[u8], signature: &[u8]) -> Result<(), KeyError> {
        self.ensure_valid()?;
        let mut mac = self.mac();
        mac.update(msg);
        mac.verify_slice(signature).map_err(|_| KeyError::AuthFailure)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub key_id: KeyId,
    pub nonce: [u8; NONCE_LEN],
    pub body: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl Ciphertext {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_capacity(8 + NONCE_LEN + 4 + self.body.len() + TAG_LEN);
        e.u64(self.key_id.0).raw(&self.nonce).bytes(&self.body).raw(&self.tag);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let key_id = KeyId(d.u64()?);
        let nonce = d.array()?;
        let body = d.bytes()?.to_vec();
        let tag = d.array()?;
        d.finish()?;
        Ok(Ciphertext { key_id, nonce, body, tag })
    }
}

/// Per-party key store. At most one valid key per slot.
#[derive(Debug, Clone, Default)]
pub struct KeyTable {
    slots: BTreeMap<KeySlot, KeyId>,
    keys: BTreeMap<KeyId, SharedKey>,
}

impl KeyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: SharedKey) -> Result<(), KeyError> {
        if let Some(existing) = self.slots.get(&key.slot) {
            if self.keys.get(existing).is_some_and(SharedKey::is_valid) {
                return Err(KeyError::KeyAlreadyBound(*existing));
            }
        }
        self.slots.insert(key.slot.clone(), key.key_id);
        self.keys.insert(key.key_id, key);
        Ok(())
    }

    /// Valid key by id; invalidated keys are reported as such.
    pub fn get(&self, id: KeyId) -> Result<&SharedKey, KeyError> {
        let key = self.keys.get(&id).ok_or(KeyError::UnknownKey(id))?;
        key.ensure_valid()?;
        Ok(key)
    }

    pub fn get_mut(&mut self, id: KeyId) -> Result<&mut SharedKey, KeyError> {
        let key = self.keys.get_mut(&id).ok_or(KeyError::UnknownKey(id))?;
        key.ensure_valid()?;
        Ok(key)
    }

    pub fn lookup(&self, slot: &KeySlot) -> Option<&SharedKey> {
        self.slots.get(slot).and_then(|id| self.keys.get(id)).filter(|k| k.valid)
    }

    pub fn is_valid(&self, id: KeyId) -> bool {
        self.keys.get(&id).is_some_and(SharedKey::is_valid)
    }

    /// Marks the key invalid. Invalidating an unknown or already invalid
    /// key is an error.
    pub fn invalidate(&mut self, id: KeyId) -> Result<&SharedKey, KeyError> {
        match self.keys.get_mut(&id) {
            Some(k) if k.valid => {
                k.valid = false;
                Ok(k)
            }
            _ => Err(KeyError::UnknownKey(id)),
        }
    }

    /// Every key ever inserted, including invalidated ones.
    pub fn iter(&self) -> impl Iterator<Item = &SharedKey> {
        self.keys.values()
    }

    pub fn valid_keys_for(&self, subject: &DeviceId) -> impl Iterator<Item = &SharedKey> {
        let subject = subject.clone();
        self.keys.values().filter(move |k| k.valid && k.slot.subject == subject)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// One simulated handshake: the share each participant sent.
#[derive(Debug, Clone)]
pub struct Handshake {
    parties: Vec<PartyId>,
    shares: Vec<[u8; 32]>,
}

impl Handshake {
    pub fn message_count(&self) -> usize {
        self.shares.len()
    }

    /// Key as computed by `party` from the public transcript plus the
    /// shares it has seen.
    pub fn derive_at(&self, party: &PartyId) -> Option<[u8; KEY_LEN]> {
        if !self.parties.contains(party) {
            return None;
        }
        let mut order: Vec<usize> = (0..self.parties.len()).collect();
        order.sort_by(|&a, &b| self.parties[a].cmp(&self.parties[b]));
        let mut h = Sha256::new();
        h.update(b"gridchain-kex");
        for i in order {
            h.update(self.parties[i].as_str().as_bytes());
            h.update([0]);
            h.update(self.shares[i]);
        }
        Some(h.finalize().into())
    }
}

/// Scheme A output: device to local miner, and local miner to remote miner.
#[derive(Debug, Clone)]
pub struct SchemeAKeys {
    pub key_dl: SharedKey,
    pub key_lr: SharedKey,
}

/// Control message telling a holder to drop a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyControl {
    pub to: PartyId,
    pub key_id: KeyId,
}

/// Issues keys. Owns the id counter and the RNG behind the handshakes.
#[derive(Debug)]
pub struct KeyExchange {
    rng: ChaCha20Rng,
    next_id: u64,
    parties: BTreeSet<PartyId>,
    messages: u64,
}

impl KeyExchange {
    pub fn new(seed: u64) -> Self {
        KeyExchange { rng: ChaCha20Rng::seed_from_u64(seed), next_id: 1, parties: BTreeSet::new(), messages: 0 }
    }

    pub fn register(&mut self, party: &PartyId) {
        self.parties.insert(party.clone());
    }

    pub fn is_registered(&self, party: &PartyId) -> bool {
        self.parties.contains(party)
    }

    /// Handshake messages exchanged so far.
    pub fn messages(&self) -> u64 {
        self.messages
    }

    fn check_known(&self, parties: &[&PartyId]) -> Result<(), KeyError> {
        match parties.iter().find(|p| !self.parties.contains(**p)) {
            Some(p) => Err(KeyError::PartyUnknown((*p).clone())),
            None => Ok(()),
        }
    }

    pub fn handshake(&mut self, parties: &[&PartyId]) -> Handshake {
        let shares = parties
            .iter()
            .map(|_| {
                let mut s = [0u8; 32];
                self.rng.fill_bytes(&mut s);
                s
            })
            .collect::<Vec<_>>();
        self.messages += parties.len() as u64;
        Handshake { parties: parties.iter().map(|p| (*p).clone()).collect(), shares }
    }

    fn issue(&mut self, parties: &[&PartyId], class: DataClass, subject: &DeviceId) -> SharedKey {
        let hs = self.handshake(parties);
        let key_bytes = hs.derive_at(parties[0]).expect("initiator is a participant");
        debug_assert!(parties.iter().all(|p| hs.derive_at(p) == Some(key_bytes)));
        let key_id = KeyId(self.next_id);
        self.next_id += 1;
        SharedKey { key_id, key_bytes, slot: KeySlot::new(parties.iter().copied(), class, subject), valid: true, nonce_counter: 0 }
    }

    fn ensure_free(table: &KeyTable, slot: &KeySlot) -> Result<(), KeyError> {
        match table.lookup(slot) {
            Some(k) => Err(KeyError::KeyAlreadyBound(k.key_id)),
            None => Ok(()),
        }
    }

    /// Two pairwise exchanges; the local miner re-encrypts between hops.
    pub fn establish_scheme_a(
        &mut self,
        table: &mut KeyTable,
        device: &DeviceId,
        local: &PartyId,
        remote: &PartyId,
        class: DataClass,
    ) -> Result<SchemeAKeys, KeyError> {
        self.check_known(&[device, local, remote])?;
        Self::ensure_free(table, &KeySlot::new([device, local], class, device))?;
        Self::ensure_free(table, &KeySlot::new([local, remote], class, device))?;
        let key_dl = self.issue(&[device, local], class, device);
        let key_lr = self.issue(&[local, remote], class, device);
        table.insert(key_dl.clone())?;
        table.insert(key_lr.clone())?;
        Ok(SchemeAKeys { key_dl, key_lr })
    }

    /// One three-party exchange; the local miner relays without re-encrypting.
    pub fn establish_scheme_b(
        &mut self,
        table: &mut KeyTable,
        device: &DeviceId,
        local: &PartyId,
        remote: &PartyId,
        class: DataClass,
    ) -> Result<SharedKey, KeyError> {
        self.establish_among(table, &[device, local, remote], class, device)
    }

    /// Key among an arbitrary holder set.
    pub fn establish_among(
        &mut self,
        table: &mut KeyTable,
        holders: &[&PartyId],
        class: DataClass,
        subject: &DeviceId,
    ) -> Result<SharedKey, KeyError> {
        self.check_known(holders)?;
        Self::ensure_free(table, &KeySlot::new(holders.iter().copied(), class, subject))?;
        let key = self.issue(holders, class, subject);
        table.insert(key.clone())?;
        Ok(key)
    }

    /// Device-to-device key issued by the miner whose current policy grants
    /// `a` Access to `b`.
    pub fn allocate_pair_key(
        &mut self,
        table: &mut KeyTable,
        policy: &PolicyHeader,
        now_ms: u64,
        a: &DeviceId,
        b: &DeviceId,
    ) -> Result<SharedKey, KeyError> {
        match authorize(policy, &AuthRequest::new(a, TxType::Access, b, now_ms)) {
            Decision::Allow { .. } => self.establish_among(table, &[a, b], DataClass::Generic, b),
            Decision::Deny { .. } => Err(KeyError::Denied),
        }
    }
}

/// Invalidates `key_id` in the issuer's table and returns one control
/// message per other holder.
pub fn invalidate_key(table: &mut KeyTable, key_id: KeyId, issuer: &PartyId) -> Result<Vec<KeyControl>, KeyError> {
    let key = table.invalidate(key_id)?;
    Ok(key
        .holders()
        .iter()
        .filter(|h| *h != issuer)
        .map(|to| KeyControl { to: to.clone(), key_id })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{DeviceMatch, LimitDuration, PolicyRule};

    fn id(s: &str) -> DeviceId {
        DeviceId::new(s).unwrap()
    }

    fn kex() -> KeyExchange {
        let mut k = KeyExchange::new(7);
        for p in ["sm-1", "hgw", "cc-storage", "u-storage", "sensor", "actuator"] {
            k.register(&id(p));
        }
        k
    }

    #[test]
    fn scheme_a_makes_two_pairwise_keys() {
        let mut k = kex();
        let mut t = KeyTable::new();
        let keys = k
            .establish_scheme_a(&mut t, &id("sm-1"), &id("hgw"), &id("cc-storage"), DataClass::HighFreq)
            .unwrap();
        assert_ne!(keys.key_dl.key_id(), keys.key_lr.key_id());
        assert_ne!(keys.key_dl.key_bytes(), keys.key_lr.key_bytes());
        assert_eq!(keys.key_dl.holders().len(), 2);
        assert!(keys.key_lr.is_held_by(&id("cc-storage")));
        assert_eq!(k.messages(), 4);
    }

    #[test]
    fn scheme_b_three_holders() {
        let mut k = kex();
        let mut t = KeyTable::new();
        let key = k
            .establish_scheme_b(&mut t, &id("sm-1"), &id("hgw"), &id("cc-storage"), DataClass::HighFreq)
            .unwrap();
        assert_eq!(key.holders().len(), 3);
        assert_eq!(k.messages(), 3);
    }

    #[test]
    fn all_ends_derive_identical_bytes() {
        let mut k = kex();
        let (a, b, c) = (id("sm-1"), id("hgw"), id("u-storage"));
        let hs = k.handshake(&[&a, &b, &c]);
        let at_a = hs.derive_at(&a).unwrap();
        assert_eq!(hs.derive_at(&b), Some(at_a));
        assert_eq!(hs.derive_at(&c), Some(at_a));
        assert_eq!(hs.derive_at(&id("outsider")), None);
    }

    #[test]
    fn unknown_party_rejected() {
        let mut k = kex();
        let mut t = KeyTable::new();
        let err = k
            .establish_scheme_b(&mut t, &id("ghost"), &id("hgw"), &id("cc-storage"), DataClass::LowFreq)
            .unwrap_err();
        assert_eq!(err, KeyError::PartyUnknown(id("ghost")));
    }

    #[test]
    fn slot_binding_and_rekey() {
        let mut k = kex();
        let mut t = KeyTable::new();
        let (d, l, r) = (id("sm-1"), id("hgw"), id("cc-storage"));
        let first = k.establish_scheme_b(&mut t, &d, &l, &r, DataClass::HighFreq).unwrap();
        let again = k.establish_scheme_b(&mut t, &d, &l, &r, DataClass::HighFreq);
        assert_eq!(again.unwrap_err(), KeyError::KeyAlreadyBound(first.key_id()));
        // the other class is a different slot
        k.establish_scheme_b(&mut t, &d, &l, &r, DataClass::LowFreq).unwrap();

        let ctl = invalidate_key(&mut t, first.key_id(), &l).unwrap();
        assert_eq!(ctl.len(), 2);
        assert!(ctl.iter().all(|c| c.key_id == first.key_id() && c.to != l));
        assert_eq!(t.get(first.key_id()).unwrap_err(), KeyError::KeyInvalid(first.key_id()));
        assert_eq!(invalidate_key(&mut t, first.key_id(), &l).unwrap_err(), KeyError::UnknownKey(first.key_id()));

        let second = k.establish_scheme_b(&mut t, &d, &l, &r, DataClass::HighFreq).unwrap();
        assert!(second.key_id() > first.key_id());
    }

    #[test]
    fn aead_round_trip_and_tamper() {
        let mut k = kex();
        let mut t = KeyTable::new();
        let mut key = k
            .establish_scheme_b(&mut t, &id("sm-1"), &id("hgw"), &id("cc-storage"), DataClass::HighFreq)
            .unwrap();
        let ct = key.encrypt(&id("sm-1"), b"reading 42").unwrap();
        assert_eq!(ct.body.len(), 10);
        assert_eq!(key.decrypt(&ct).unwrap(), b"reading 42");
        assert_eq!(Ciphertext::from_bytes(&ct.to_bytes()).unwrap(), ct);

        let mut bad = ct.clone();
        bad.body[0] ^= 1;
        assert_eq!(key.decrypt(&bad), Err(KeyError::AuthFailure));
        let mut bad = ct.clone();
        bad.tag[3] ^= 0x80;
        assert_eq!(key.decrypt(&bad), Err(KeyError::AuthFailure));

        // nonces never repeat for the same key
        let ct2 = key.encrypt(&id("sm-1"), b"reading 42").unwrap();
        assert_ne!(ct.nonce, ct2.nonce);
        let ct3 = key.encrypt(&id("hgw"), b"x").unwrap();
        assert_ne!(ct3.nonce[..4], ct2.nonce[..4]);
    }

    #[test]
    fn wrong_key_fails() {
        let mut k = kex();
        let mut t = KeyTable::new();
        let mut hf = k
            .establish_scheme_b(&mut t, &id("sm-1"), &id("hgw"), &id("cc-storage"), DataClass::HighFreq)
            .unwrap();
        let lf = k
            .establish_scheme_b(&mut t, &id("sm-1"), &id("hgw"), &id("u-storage"), DataClass::LowFreq)
            .unwrap();
        let ct = hf.encrypt(&id("sm-1"), b"p").unwrap();
        assert_eq!(lf.decrypt(&ct), Err(KeyError::AuthFailure));
        let forged = Ciphertext { key_id: lf.key_id(), ..ct };
        assert_eq!(lf.decrypt(&forged), Err(KeyError::AuthFailure));
    }

    #[test]
    fn hmac_matches_reference() {
        let mut k = kex();
        let mut t = KeyTable::new();
        let key = k.establish_among(&mut t, &[&id("hgw"), &id("cc-storage")], DataClass::Generic, &id("hgw")).unwrap();
        let sig = key.sign(b"otft").unwrap();
        // independent HMAC construction over the same key bytes
        let block = {
            let mut b = [0u8; 64];
            b[..32].copy_from_slice(key.key_bytes());
            b
        };
        let ipad: Vec<u8> = block.iter().map(|b| b ^ 0x36).chain(*b"otft").collect();
        let inner = Sha256::digest(&ipad);
        let opad: Vec<u8> = block.iter().map(|b| b ^ 0x5c).chain(inner).collect();
        assert_eq!(sig, Sha256::digest(&opad).to_vec());
        key.verify(b"otft", &sig).unwrap();
        assert_eq!(key.verify(b"otfT", &sig), Err(KeyError::AuthFailure));
    }

    #[test]
    fn pair_key_requires_access_rule() {
        let mut k = kex();
        let mut t = KeyTable::new();
        let (s, a) = (id("sensor"), id("actuator"));
        let empty = PolicyHeader::default();
        assert_eq!(k.allocate_pair_key(&mut t, &empty, 0, &s, &a).unwrap_err(), KeyError::Denied);
        let policy = PolicyHeader::new(vec![PolicyRule::allow(
            s.clone(),
            TxType::Access,
            DeviceMatch::Exact(a.clone()),
            10,
            LimitDuration::Hourly,
        )]);
        let key = k.allocate_pair_key(&mut t, &policy, 0, &s, &a).unwrap();
        assert_eq!(key.holders().iter().collect::<Vec<_>>(), vec![&a, &s]);
        // the reverse direction has no rule
        assert_eq!(k.allocate_pair_key(&mut t, &policy, 0, &a, &s).unwrap_err(), KeyError::Denied);

        invalidate_key(&mut t, key.key_id(), &id("hgw")).unwrap();
        let fresh = k.allocate_pair_key(&mut t, &policy, 0, &s, &a).unwrap();
        assert_ne!(fresh.key_id(), key.key_id());
        assert!(!t.is_valid(key.key_id()));
    }

    #[test]
    fn debug_redacts_key_bytes() {
        let mut k = kex();
        let mut t = KeyTable::new();
        let key = k.establish_among(&mut t, &[&id("hgw"), &id("cc-storage")], DataClass::Generic, &id("hgw")).unwrap();
        let dbg = format!("{key:?}");
        assert!(dbg.contains("redacted"));
        assert!(!dbg.contains(&hex::encode(key.key_bytes())));
        assert_eq!(key.key_id().to_string(), "k000001");
    }

    #[test]
    fn invalid_key_refuses_use() {
        let mut k = kex();
        let mut t = KeyTable::new();
        let key = k.establish_among(&mut t, &[&id("hgw"), &id("cc-storage")], DataClass::Generic, &id("hgw")).unwrap();
        let kid = key.key_id();
        invalidate_key(&mut t, kid, &id("hgw")).unwrap();
        let stale = t.iter().find(|k| k.key_id() == kid).unwrap().clone();
        assert_eq!(stale.sign(b"x"), Err(KeyError::KeyInvalid(kid)));
    }
}
