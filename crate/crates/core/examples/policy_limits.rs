//! Policy-header authorization and per-window rate limits.

use gridchain::ledger::{DeviceId, PolicyHeader, PolicyRule, TxType};
use gridchain::policy::{authorize, check_and_count, default_policy_for, App, AuthRequest, Decision, RateCounterState, RateVerdict};

const HOUR: u64 = 3_600_000;

fn main() {
    let id = |s: &str| DeviceId::new(s).unwrap();
    let (cc, utility, meter) = (id("cc"), id("utility"), id("sm-01-01-01"));

    let header = PolicyHeader::new(vec![
        PolicyRule::deny(utility.clone(), TxType::Otft, meter.clone()),
        default_policy_for(App::AmiHf, meter.clone(), meter.clone()),
        default_policy_for(App::DrmsCt, cc.clone(), gridchain::ledger::DeviceMatch::Any),
    ]);
    for app in [App::AmiHf, App::AmiLf, App::DrmsCt, App::OmsEbt] {
        println!("{app:?}: {:?}", app.default_limit());
    }

    for (who, tx) in [(&meter, TxType::Store), (&cc, TxType::Ct), (&utility, TxType::Otft), (&cc, TxType::Otft)] {
        let d = authorize(&header, &AuthRequest::new(who, tx, &meter, 0));
        println!("{who} {tx:?} on {meter}: {d:?}");
    }

    // a meter pushing a store every 5 minutes against 4 per hour
    let Decision::Allow { rule, .. } = authorize(&header, &AuthRequest::new(&meter, TxType::Store, &meter, 0)) else {
        unreachable!()
    };
    let mut rc = RateCounterState::new();
    let mut per_hour = [0u32; 3];
    for k in 1..36u64 {
        let t = k * 300_000;
        if let RateVerdict::WithinLimit { .. } = check_and_count(&mut rc, &rule, &meter, t) {
            per_hour[(t / HOUR) as usize] += 1;
        }
    }
    println!("forwarded per hour window: {per_hour:?}");
}
