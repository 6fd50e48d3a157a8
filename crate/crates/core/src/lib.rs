pub mod attack;
pub mod device;
pub mod keys;
pub mod ledger;
pub mod metrics;
pub mod miner;
pub mod policy;
pub mod scenario;
pub mod simnet;
