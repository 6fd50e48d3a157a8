//! Builds a three-block device chain, then breaks it a few different ways.
//!
//! ```text
//! cargo run --example ledger_tamper
//! ```

use gridchain::ledger::{
    Actor, Block, Destination, DeviceId, Hasher, LimitDuration, Ledger, PolicyHeader, PolicyRule, Transaction, TxType,
};

fn chain() -> Ledger {
    let h = Hasher::sha256();
    let owner = DeviceId::new("sm-demo").unwrap();
    let rule = PolicyRule::allow(owner.clone(), TxType::Store, owner.clone(), 4, LimitDuration::Hourly);
    let mut l = Ledger::with_capacity(owner.clone(), Destination::ControlCenter, PolicyHeader::new(vec![rule]), 10, h);
    l.append_transaction(Transaction::genesis(owner.clone(), b"genesis".to_vec(), 0, h)).unwrap();
    for i in 1..30u64 {
        let tx = Transaction::new(l.next_link(), owner.clone(), TxType::Store, format!("{} Wh", 1000 + i).into_bytes(), i * 900_000, h);
        l.append_transaction(tx).unwrap();
    }
    l
}

fn main() {
    let l = chain();
    let head = l.last_transaction_ref(l.owner()).unwrap();
    println!("{} txs, {} sealed blocks, head #{} {}", l.tx_count(), l.sealed_blocks(), head.tx_number, head.tx_digest.short());
    println!("validate: {:?}", l.validate_chain());

    // edit a reading in place
    let mut edited = l.clone();
    edited.tamper(|blocks| blocks[1].transactions[3].payload_cipher[0] ^= 1);
    println!("payload edit: {:?}", edited.validate_chain().unwrap_err());

    // recompute the payload digest too, so only the link gives it away
    let mut forged = l.clone();
    let h = l.hasher();
    forged.tamper(|blocks| {
        let tx = &mut blocks[1].transactions[3];
        tx.payload_cipher = b"0 Wh".to_vec();
        tx.payload_digest = h.digest(&tx.payload_cipher);
    });
    println!("re-digested edit: {:?}", forged.validate_chain().unwrap_err());

    // a single flipped byte in the canonical encoding of a sealed block
    let bytes = l.blocks()[0].to_bytes();
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0xff;
    match Block::from_bytes(&flipped) {
        Ok(b) => {
            let mut copy = l.clone();
            copy.tamper(|blocks| blocks[0] = b);
            println!("byte flip at {}: {:?}", bytes.len() / 2, copy.validate_chain().unwrap_err());
        }
        Err(e) => println!("byte flip at {}: does not decode ({e})", bytes.len() / 2),
    }

    // policy edits land in the open tail only
    let mut p = l.clone();
    let owner = p.owner().clone();
    let home = DeviceId::new("homeowner").unwrap();
    let rule = PolicyRule::allow(home, TxType::Access, owner.clone(), 1, LimitDuration::Daily);
    println!("home owner edits meter rule: {:?}", p.update_policy(rule.clone(), Actor::HomeOwner, |d| d == &owner));
    println!("utility edits meter rule: {:?}", p.update_policy(rule, Actor::Utility, |d| d == &owner));
    println!("still valid after edit: {:?}", p.validate_chain());
}
