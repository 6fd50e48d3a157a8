use std::cell::Cell;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    Actor, Block, ChainLink, DeviceId, DeviceMatch, Destination, Digest, Hasher, LedgerError,
    PolicyHeader, PolicyRule, Transaction, TxType, DEFAULT_BLOCK_CAPACITY,
};

/// Position of an appended transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxRef {
    pub block_number: u64,
    pub tx_index: usize,
}

/// Newest transaction of a chain: where it sits, its chained digest and
/// its sequence number. This is what the store-authentication handshake
/// compares between the local and the remote copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxHead {
    pub block_number: u64,
    pub tx_digest: Digest,
    pub tx_number: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainFault {
    BlockNumber,
    BlockDigestMismatch,
    SealState,
    WrongOwner,
    GenesisMisplaced,
    TxLinkMismatch,
    TxNumberGap,
    PayloadDigestMismatch,
    OverCapacity,
}

/// Earliest inconsistency found by [`Ledger::validate_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainBreak {
    pub block_number: u64,
    pub reason: ChainFault,
}

/// Append-only chain of one owner's transactions.
///
/// The last block is always open (unsealed); a block is sealed as soon as
/// it holds `capacity` transactions and a fresh tail carrying a copy of the
/// policy header is opened behind it.
#[derive(Debug, Clone)]
pub struct Ledger {
    owner: DeviceId,
    destination: Destination,
    blocks: Vec<Block>,
    allowed_types: BTreeSet<TxType>,
    capacity: usize,
    hasher: Hasher,
    head: Option<TxHead>,
    // set by raw mutation; forces a full re-walk for the head
    tampered: bool,
    policy_reads: Cell<u64>,
}

impl Ledger {
    pub fn new(owner: DeviceId, destination: Destination, policy: PolicyHeader) -> Self {
        Self::with_capacity(owner, destination, policy, DEFAULT_BLOCK_CAPACITY, Hasher::default())
    }

    pub fn with_capacity(
        owner: DeviceId,
        destination: Destination,
        policy: PolicyHeader,
        capacity: usize,
        hasher: Hasher,
    ) -> Self {
        assert!(capacity > 0, "block capacity must be positive");
        Ledger {
            owner,
            allowed_types: destination.allowed_types(),
            destination,
            blocks: vec![Block::open(0, Digest::ZERO, policy)],
            capacity,
            hasher,
            head: None,
            tampered: false,
            policy_reads: Cell::new(0),
        }
    }

    pub fn owner(&self) -> &DeviceId {
        &self.owner
    }

    pub fn destination(&self) -> Destination {
        self.destination
    }

    pub fn allowed_types(&self) -> &BTreeSet<TxType> {
        &self.allowed_types
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn hasher(&self) -> Hasher {
        self.hasher
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn sealed_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.sealed).count()
    }

    pub fn tx_count(&self) -> usize {
        self.blocks.iter().map(|b| b.transactions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.iter().all(|b| b.transactions.is_empty())
    }

    pub fn transactions(&self) -> impl Iterator<Item = (TxRef, &Transaction)> {
        self.blocks.iter().flat_map(|b| {
            b.transactions.iter().enumerate().map(move |(tx_index, tx)| {
                (TxRef { block_number: b.block_number, tx_index }, tx)
            })
        })
    }

    pub fn transaction(&self, at: TxRef) -> Option<&Transaction> {
        self.blocks
            .get(at.block_number as usize)
            .and_then(|b| b.transactions.get(at.tx_index))
    }

    fn tail(&self) -> &Block {
        self.blocks.last().expect("ledger always has a tail block")
    }

    fn tail_mut(&mut self) -> &mut Block {
        self.blocks.last_mut().expect("ledger always has a tail block")
    }

    /// Block number the next appended transaction will land in.
    pub fn next_block_number(&self) -> u64 {
        self.tail().block_number
    }

    /// Link fields the next transaction must carry.
    pub fn next_link(&self) -> ChainLink {
        match self.head() {
            None => ChainLink::GENESIS,
            Some(h) => ChainLink { prev_tx_digest: h.tx_digest, tx_number: h.tx_number + 1 },
        }
    }

    fn head(&self) -> Option<TxHead> {
        self.head
    }

    fn recompute_head(&self) -> Option<TxHead> {
        let mut prev = Digest::ZERO;
        let mut head = None;
        for block in &self.blocks {
            for tx in &block.transactions {
                prev = tx.digest_linked(&prev, self.hasher);
                head = Some(TxHead { block_number: block.block_number, tx_digest: prev, tx_number: tx.tx_number });
            }
        }
        head
    }

    pub fn append_transaction(&mut self, tx: Transaction) -> Result<TxRef, LedgerError> {
        if tx.device_id != self.owner {
            return Err(LedgerError::WrongOwner { owner: self.owner.clone(), got: tx.device_id });
        }
        let link = self.next_link();
        if tx.tx_type == TxType::Genesis {
            if link.tx_number != 0 {
                return Err(LedgerError::TypeNotAllowed(TxType::Genesis));
            }
        } else if link.tx_number == 0 {
            return Err(LedgerError::MissingGenesis);
        } else if !self.allowed_types.contains(&tx.tx_type) {
            return Err(LedgerError::TypeNotAllowed(tx.tx_type));
        }
        if tx.prev_tx_digest != link.prev_tx_digest || tx.tx_number != link.tx_number {
            return Err(LedgerError::ChainLinkMismatch {
                expected_number: link.tx_number,
                expected_prev: link.prev_tx_digest,
                got_number: tx.tx_number,
            });
        }
        if self.hasher.digest(&tx.payload_cipher) != tx.payload_digest {
            return Err(LedgerError::PayloadDigestMismatch);
        }

        let digest = tx.digest(self.hasher);
        let tx_number = tx.tx_number;
        let capacity = self.capacity;
        let tail = self.tail_mut();
        let at = TxRef { block_number: tail.block_number, tx_index: tail.transactions.len() };
        tail.transactions.push(tx);
        let full = tail.transactions.len() >= capacity;
        let tx_digest = match self.head {
            Some(h) if self.tampered => self.last_tx().expect("just pushed").digest_linked(&h.tx_digest, self.hasher),
            _ => digest,
        };
        self.head = Some(TxHead { block_number: at.block_number, tx_digest, tx_number });
        if full {
            self.seal_block()?;
        }
        Ok(at)
    }

    /// Seals the tail and opens its successor. Returns the sealed block's
    /// digest, which becomes the successor's `prev_block_digest`.
    pub fn seal_block(&mut self) -> Result<Digest, LedgerError> {
        let hasher = self.hasher;
        let tail = self.tail_mut();
        if tail.transactions.is_empty() {
            return Err(LedgerError::EmptyBlock);
        }
        tail.sealed = true;
        let digest = tail.digest(hasher);
        let next = Block::open(tail.block_number + 1, digest, tail.policy_header.clone());
        self.blocks.push(next);
        Ok(digest)
    }

    /// Re-hashes the whole chain and reports the earliest inconsistency.
    pub fn validate_chain(&self) -> Result<(), ChainBreak> {
        let h = self.hasher;
        let brk = |block_number: u64, reason| Err(ChainBreak { block_number, reason });
        let mut prev_tx = Digest::ZERO;
        let mut next_number = 0u64;
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let n = i as u64;
            if i == 0 {
                if !block.prev_block_digest.is_zero() {
                    return brk(0, ChainFault::BlockDigestMismatch);
                }
            } else if block.prev_block_digest != self.blocks[i - 1].digest(h) {
                return brk(self.blocks[i - 1].block_number, ChainFault::BlockDigestMismatch);
            }
            if block.block_number != n {
                return brk(n, ChainFault::BlockNumber);
            }
            if block.sealed == (i == last) {
                return brk(n, ChainFault::SealState);
            }
            if block.transactions.len() > self.capacity {
                return brk(n, ChainFault::OverCapacity);
            }
            for tx in &block.transactions {
                if tx.device_id != self.owner {
                    return brk(n, ChainFault::WrongOwner);
                }
                if (tx.tx_type == TxType::Genesis) != (next_number == 0) {
                    return brk(n, ChainFault::GenesisMisplaced);
                }
                if tx.prev_tx_digest != prev_tx {
                    return brk(n, ChainFault::TxLinkMismatch);
                }
                if tx.tx_number != next_number {
                    return brk(n, ChainFault::TxNumberGap);
                }
                if h.digest(&tx.payload_cipher) != tx.payload_digest {
                    return brk(n, ChainFault::PayloadDigestMismatch);
                }
                prev_tx = tx.digest(h);
                next_number += 1;
            }
        }
        Ok(())
    }

    /// Block number, chained digest and sequence number of the owner's
    /// newest transaction. The digest is recomputed through the chain, so
    /// it changes whenever any earlier transaction was altered.
    pub fn last_transaction_ref(&self, device: &DeviceId) -> Result<TxHead, LedgerError> {
        if device != &self.owner {
            return Err(LedgerError::WrongOwner { owner: self.owner.clone(), got: device.clone() });
        }
        self.head().ok_or(LedgerError::EmptyLedger)
    }

    /// Policy header of the tail block, the only one ever consulted for
    /// authorization.
    pub fn current_policy(&self) -> Result<&PolicyHeader, LedgerError> {
        if self.is_empty() {
            return Err(LedgerError::EmptyLedger);
        }
        self.policy_reads.set(self.policy_reads.get() + 1);
        Ok(&self.tail().policy_header)
    }

    /// Number of [`current_policy`](Self::current_policy) lookups served.
    pub fn policy_reads(&self) -> u64 {
        self.policy_reads.get()
    }

    /// Applies `rule` to the tail header. Home owners may not touch rules
    /// that cover a smart meter (including wildcard rules); the utility may
    /// edit anything.
    pub fn update_policy(
        &mut self,
        rule: PolicyRule,
        actor: Actor,
        is_meter: impl Fn(&DeviceId) -> bool,
    ) -> Result<(), LedgerError> {
        rule.validate()?;
        if actor == Actor::HomeOwner {
            let touches_meter = match &rule.device_id {
                DeviceMatch::Any => true,
                DeviceMatch::Exact(id) => is_meter(id),
            };
            if touches_meter {
                return Err(LedgerError::Denied { actor, device: rule.device_id });
            }
        }
        self.tail_mut().policy_header.upsert(rule);
        Ok(())
    }

    /// Direct access to stored blocks, bypassing every check. Used by the
    /// attack harness to model a compromised store. The cached head is
    /// recomputed through the mutated chain afterwards.
    pub fn tamper<R>(&mut self, f: impl FnOnce(&mut Vec<Block>) -> R) -> R {
        self.tampered = true;
        let out = f(&mut self.blocks);
        if self.blocks.is_empty() {
            self.blocks.push(Block::open(0, Digest::ZERO, PolicyHeader::default()));
        }
        self.head = self.recompute_head();
        out
    }

    /// Whether [`tamper`](Self::tamper) was ever used.
    pub fn was_tampered(&self) -> bool {
        self.tampered
    }

    fn last_tx(&self) -> Option<&Transaction> {
        self.blocks.iter().rev().find_map(|b| b.transactions.last())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{sha256, LimitDuration};

    fn dev(s: &str) -> DeviceId {
        DeviceId::new(s).unwrap()
    }

    fn ledger(cap: usize) -> Ledger {
        Ledger::with_capacity(dev("sm-7"), Destination::ControlCenter, PolicyHeader::default(), cap, Hasher::default())
    }

    fn next_store(l: &Ledger, payload: &[u8], ts: u64) -> Transaction {
        Transaction::new(l.next_link(), l.owner().clone(), TxType::Store, payload.to_vec(), ts, l.hasher())
    }

    fn filled(cap: usize, n: usize) -> Ledger {
        let mut l = ledger(cap);
        l.append_transaction(Transaction::genesis(dev("sm-7"), b"g".to_vec(), 0, Hasher::default()))
            .unwrap();
        for i in 1..n {
            let tx = next_store(&l, format!("p{i}").as_bytes(), i as u64);
            l.append_transaction(tx).unwrap();
        }
        l
    }

    #[test]
    fn genesis_on_empty_ledger() {
        let mut l = ledger(10);
        let g = Transaction::genesis(dev("sm-7"), b"g".to_vec(), 0, Hasher::default());
        assert_eq!(l.append_transaction(g).unwrap(), TxRef { block_number: 0, tx_index: 0 });
    }

    #[test]
    fn second_tx_links_to_independently_hashed_genesis() {
        let mut l = ledger(10);
        let g = Transaction::genesis(dev("sm-7"), b"g".to_vec(), 0, Hasher::default());
        // oracle: hash the canonical bytes directly
        let expected = sha256(&g.to_bytes());
        l.append_transaction(g).unwrap();
        let mut st = next_store(&l, b"x", 1);
        assert_eq!(st.prev_tx_digest, expected);
        st.prev_tx_digest = expected;
        assert_eq!(l.append_transaction(st).unwrap(), TxRef { block_number: 0, tx_index: 1 });
    }

    #[test]
    fn sequence_gap_is_link_mismatch() {
        let mut l = filled(10, 3);
        let mut tx = next_store(&l, b"x", 9);
        tx.tx_number = 5;
        assert!(matches!(
            l.append_transaction(tx),
            Err(LedgerError::ChainLinkMismatch { expected_number: 3, got_number: 5, .. })
        ));
    }

    #[test]
    fn type_and_owner_checks() {
        let mut l = Ledger::new(dev("lf-1"), Destination::Utility, PolicyHeader::default());
        l.append_transaction(Transaction::genesis(dev("lf-1"), vec![], 0, Hasher::default())).unwrap();
        let ct = Transaction::new(l.next_link(), dev("lf-1"), TxType::Ct, vec![], 1, l.hasher());
        assert_eq!(l.append_transaction(ct), Err(LedgerError::TypeNotAllowed(TxType::Ct)));
        let other = Transaction::new(l.next_link(), dev("x"), TxType::Store, vec![], 1, l.hasher());
        assert!(matches!(l.append_transaction(other), Err(LedgerError::WrongOwner { .. })));
        let g2 = Transaction::new(l.next_link(), dev("lf-1"), TxType::Genesis, vec![], 1, l.hasher());
        assert_eq!(l.append_transaction(g2), Err(LedgerError::TypeNotAllowed(TxType::Genesis)));

        let mut empty = ledger(10);
        let st = next_store(&empty, b"x", 0);
        assert_eq!(empty.append_transaction(st), Err(LedgerError::MissingGenesis));
    }

    #[test]
    fn eager_sealing_and_chaining() {
        let mut l = filled(10, 10);
        assert_eq!(l.sealed_blocks(), 1);
        assert_eq!(l.blocks().len(), 2);
        let d = l.blocks()[0].digest(l.hasher());
        assert_eq!(l.blocks()[1].prev_block_digest, d);
        assert_eq!(l.seal_block(), Err(LedgerError::EmptyBlock));
        let tx = next_store(&l, b"x", 11);
        l.append_transaction(tx).unwrap();
        let d1 = l.seal_block().unwrap();
        assert_eq!(l.blocks()[2].prev_block_digest, d1);
        assert!(l.validate_chain().is_ok());
    }

    #[test]
    fn last_ref_after_twelve_appends() {
        // replay oracle: block = (n-1) / cap, number = n-1
        let l = filled(10, 12);
        let head = l.last_transaction_ref(&dev("sm-7")).unwrap();
        assert_eq!(head.block_number, 11 / 10);
        assert_eq!(head.tx_number, 11);
        let last = l.transaction(TxRef { block_number: 1, tx_index: 1 }).unwrap();
        assert_eq!(head.tx_digest, last.digest(l.hasher()));

        let only_genesis = filled(10, 1);
        let g = only_genesis.transaction(TxRef { block_number: 0, tx_index: 0 }).unwrap();
        assert_eq!(
            only_genesis.last_transaction_ref(&dev("sm-7")).unwrap(),
            TxHead { block_number: 0, tx_digest: sha256(&g.to_bytes()), tx_number: 0 }
        );
        assert_eq!(ledger(10).last_transaction_ref(&dev("sm-7")), Err(LedgerError::EmptyLedger));
    }

    #[test]
    fn payload_flip_reports_its_block() {
        let mut l = filled(10, 30);
        l.tamper(|b| b[1].transactions[4].payload_cipher[0] ^= 0x01);
        assert_eq!(
            l.validate_chain(),
            Err(ChainBreak { block_number: 1, reason: ChainFault::PayloadDigestMismatch })
        );
    }

    #[test]
    fn sealed_policy_edit_reports_that_block() {
        let mut l = filled(10, 30);
        let rule = PolicyRule::allow(dev("cc"), TxType::Otft, DeviceMatch::Any, 4, LimitDuration::Hourly);
        l.tamper(|b| b[1].policy_header.rules.push(rule));
        assert_eq!(
            l.validate_chain(),
            Err(ChainBreak { block_number: 1, reason: ChainFault::BlockDigestMismatch })
        );
    }

    #[test]
    fn head_changes_when_an_earlier_tx_is_altered() {
        let mut l = filled(10, 15);
        let before = l.last_transaction_ref(&dev("sm-7")).unwrap();
        l.tamper(|b| b[0].transactions[3].payload_cipher.push(0));
        let after = l.last_transaction_ref(&dev("sm-7")).unwrap();
        assert_eq!(before.block_number, after.block_number);
        assert_ne!(before.tx_digest, after.tx_digest);
        // and the next honest append no longer links
        let mut honest = Transaction::new(
            ChainLink { prev_tx_digest: before.tx_digest, tx_number: before.tx_number + 1 },
            dev("sm-7"),
            TxType::Store,
            b"x".to_vec(),
            99,
            l.hasher(),
        );
        honest.timestamp_ms = 99;
        assert!(matches!(l.append_transaction(honest), Err(LedgerError::ChainLinkMismatch { .. })));
    }

    #[test]
    fn policy_comes_from_tail() {
        let mut l = ledger(2);
        assert_eq!(l.current_policy(), Err(LedgerError::EmptyLedger));
        let p1 = PolicyRule::allow(dev("cc"), TxType::Otft, DeviceMatch::Any, 4, LimitDuration::Hourly);
        let p2 = PolicyRule::allow(dev("cc"), TxType::Ct, DeviceMatch::Any, 4, LimitDuration::Daily);
        l.update_policy(p1.clone(), Actor::Utility, |_| true).unwrap();
        l.append_transaction(Transaction::genesis(dev("sm-7"), vec![], 0, Hasher::default())).unwrap();
        let tx = next_store(&l, b"a", 1);
        l.append_transaction(tx).unwrap();
        assert_eq!(l.sealed_blocks(), 1);
        l.update_policy(p2.clone(), Actor::Utility, |_| true).unwrap();
        // oracle: inspect the tail directly
        let tail = &l.blocks().last().unwrap().policy_header;
        assert_eq!(l.current_policy().unwrap(), tail);
        assert_eq!(l.current_policy().unwrap().rules, vec![p1.clone(), p2]);
        assert_eq!(l.blocks()[0].policy_header.rules, vec![p1]);
        assert_eq!(l.policy_reads(), 2);
    }

    #[test]
    fn home_owner_cannot_touch_meter_rules() {
        let mut l = filled(10, 1);
        let is_meter = |d: &DeviceId| d.as_str().starts_with("sm-");
        let meter_rule = PolicyRule::allow(dev("owner"), TxType::Store, dev("sm-7"), 100, LimitDuration::Hourly);
        assert!(matches!(
            l.update_policy(meter_rule.clone(), Actor::HomeOwner, is_meter),
            Err(LedgerError::Denied { .. })
        ));
        let wildcard = PolicyRule::allow(dev("owner"), TxType::Store, DeviceMatch::Any, 100, LimitDuration::Hourly);
        assert!(l.update_policy(wildcard, Actor::HomeOwner, is_meter).is_err());
        let thermostat = PolicyRule::allow(dev("owner"), TxType::Access, dev("thermostat-1"), 10, LimitDuration::Hourly);
        assert!(l.update_policy(thermostat.clone(), Actor::HomeOwner, is_meter).is_ok());
        assert!(l.update_policy(meter_rule, Actor::Utility, is_meter).is_ok());
        assert_eq!(l.current_policy().unwrap().rules[0], thermostat);
    }

    #[test]
    fn update_replaces_same_subject() {
        let mut l = filled(10, 1);
        let mut r = PolicyRule::allow(dev("cc"), TxType::Otft, DeviceMatch::Any, 4, LimitDuration::Hourly);
        l.update_policy(r.clone(), Actor::Utility, |_| false).unwrap();
        r.tx_limit = 8;
        l.update_policy(r.clone(), Actor::Utility, |_| false).unwrap();
        assert_eq!(l.current_policy().unwrap().rules, vec![r]);
    }
}
