//! The two store-path key arrangements side by side: scheme A re-encrypts
//! at the home gateway, scheme B shares one key among all three parties.

use gridchain::keys::{DataClass, KeyExchange, KeyTable};
use gridchain::ledger::DeviceId;

fn main() {
    let id = |s: &str| DeviceId::new(s).unwrap();
    let (meter, hgw, storage) = (id("sm-01-01-01"), id("hgw-01-01"), id("cc-storage"));
    let reading = b"register 1204339 Wh";

    let mut kex = KeyExchange::new(7);
    for p in [&meter, &hgw, &storage] {
        kex.register(p);
    }

    let mut table = KeyTable::new();
    let a = kex.establish_scheme_a(&mut table, &meter, &hgw, &storage, DataClass::HighFreq).unwrap();
    let mut dl = a.key_dl.clone();
    let mut lr = a.key_lr.clone();
    let hop1 = dl.encrypt(&meter, reading).unwrap();
    let at_hgw = dl.decrypt(&hop1).unwrap();
    let hop2 = lr.encrypt(&hgw, &at_hgw).unwrap();
    let at_storage = lr.decrypt(&hop2).unwrap();
    println!("scheme A: keys {} and {}, {} handshake messages so far", a.key_dl.key_id(), a.key_lr.key_id(), kex.messages());
    println!("  hop ciphertexts differ: {}", hop1.to_bytes() != hop2.to_bytes());
    println!("  storage reads: {}", String::from_utf8_lossy(&at_storage));

    let before = kex.messages();
    let mut b = kex.establish_scheme_b(&mut table, &meter, &hgw, &storage, DataClass::LowFreq).unwrap();
    let ct = b.encrypt(&meter, reading).unwrap();
    println!("scheme B: key {} held by {:?}, {} handshake messages", b.key_id(), b.holders(), kex.messages() - before);
    println!("  storage reads: {}", String::from_utf8_lossy(&b.decrypt(&ct).unwrap()));

    // a key is bound to its data class; the HF key cannot open LF data
    println!("HF key opens LF ciphertext: {}", lr.decrypt(&ct).is_ok());

    let controls = gridchain::keys::invalidate_key(&mut table, b.key_id(), &hgw).unwrap();
    println!("revoked {}: {} control messages, table still valid: {}", b.key_id(), controls.len(), table.is_valid(b.key_id()));
}
