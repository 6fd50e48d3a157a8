//! Field device models. Devices are passive: the simulation asks them what
//! they emit at a given instant and they answer deterministically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::keys::KeyId;
use crate::ledger::{DeviceId, PartyId};

pub const HOUR_MS: u64 = 3_600_000;
pub const WEEK_MS: u64 = 7 * 24 * HOUR_MS;

/// Which of a meter's two data streams a reading belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    /// High-frequency readings for the control center.
    Hf,
    /// Low-frequency billing readings for the utility.
    Lf,
}

/// Cumulative consumption register advanced by a seeded random walk.
#[derive(Debug, Clone)]
pub struct ReadingWalk {
    rng: ChaCha8Rng,
    register_wh: u64,
}

impl ReadingWalk {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let register_wh = rng.gen_range(1_000_000..5_000_000);
        ReadingWalk { rng, register_wh }
    }

    pub fn current(&self) -> u64 {
        self.register_wh
    }

    pub fn advance(&mut self) -> u64 {
        self.register_wh += self.rng.gen_range(20..600);
        self.register_wh
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeterReading {
    pub stream: Stream,
    pub at_ms: u64,
    pub register_wh: u64,
}

#[derive(Debug, Clone)]
pub struct SmartMeter {
    pub device_id: DeviceId,
    pub hgw: PartyId,
    pub hf_period_ms: u64,
    pub lf_period_ms: u64,
    /// Ledger identity of the HF stream.
    pub hf_chain: DeviceId,
    /// Ledger identity of the LF stream.
    pub lf_chain: DeviceId,
    pub hfuk: Option<KeyId>,
    pub lfuk: Option<KeyId>,
    pub online: bool,
    walk: ReadingWalk,
}

impl SmartMeter {
    pub fn new(device_id: DeviceId, hgw: PartyId, seed: u64) -> Self {
        SmartMeter {
            hf_chain: device_id.clone(),
            lf_chain: device_id.clone(),
            device_id,
            hgw,
            hf_period_ms: 15 * 60 * 1000,
            lf_period_ms: WEEK_MS,
            hfuk: None,
            lfuk: None,
            online: true,
            walk: ReadingWalk::new(seed),
        }
    }

    pub fn with_periods(mut self, hf_period_ms: u64, lf_period_ms: u64) -> Self {
        self.hf_period_ms = hf_period_ms;
        self.lf_period_ms = lf_period_ms;
        self
    }

    pub fn chain(&self, stream: Stream) -> &DeviceId {
        match stream {
            Stream::Hf => &self.hf_chain,
            Stream::Lf => &self.lf_chain,
        }
    }

    pub fn key(&self, stream: Stream) -> Option<KeyId> {
        match stream {
            Stream::Hf => self.hfuk,
            Stream::Lf => self.lfuk,
        }
    }

    /// First emission instant strictly after `after_ms`.
    pub fn next_boundary(&self, after_ms: u64) -> u64 {
        next_multiple(after_ms, self.hf_period_ms).min(next_multiple(after_ms, self.lf_period_ms))
    }

    /// Readings due at `now_ms`. Nothing is due at t = 0.
    pub fn tick(&mut self, now_ms: u64) -> Vec<MeterReading> {
        let mut out = Vec::new();
        if now_ms == 0 {
            return out;
        }
        for (stream, period) in [(Stream::Hf, self.hf_period_ms), (Stream::Lf, self.lf_period_ms)] {
            if now_ms.is_multiple_of(period) {
                out.push(MeterReading { stream, at_ms: now_ms, register_wh: self.walk.advance() });
            }
        }
        out
    }

    /// Instantaneous reading for an on-demand read.
    pub fn read_now(&self) -> u64 {
        self.walk.current()
    }
}

fn next_multiple(after: u64, period: u64) -> u64 {
    (after / period + 1) * period
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeviceError {
    #[error("pair key {0} is no longer valid")]
    KeyInvalid(KeyId),
    #[error("no pair key allocated")]
    NoKey,
}

/// A sensor driving an actuator, e.g. a temperature sensor and an AC unit.
#[derive(Debug, Clone)]
pub struct HanDevicePair {
    pub sensor_id: DeviceId,
    pub actuator_id: DeviceId,
    pub pair_key: Option<KeyId>,
    pub actuator_state: Switch,
    pub threshold: i64,
    pub report_period_ms: u64,
    rng: ChaCha8Rng,
    temperature: i64,
}

impl HanDevicePair {
    pub fn new(sensor_id: DeviceId, actuator_id: DeviceId, seed: u64) -> Self {
        HanDevicePair {
            sensor_id,
            actuator_id,
            pair_key: None,
            actuator_state: Switch::Off,
            threshold: 25,
            report_period_ms: 30 * 60 * 1000,
            rng: ChaCha8Rng::seed_from_u64(seed),
            temperature: 22,
        }
    }

    /// Next sensor sample, a bounded walk around room temperature.
    pub fn sample(&mut self) -> i64 {
        self.temperature = (self.temperature + self.rng.gen_range(-2..=2)).clamp(15, 35);
        self.temperature
    }

    /// Actuator rule: on above the threshold, off otherwise.
    pub fn decide(&self, value: i64) -> Switch {
        if value > self.threshold {
            Switch::On
        } else {
            Switch::Off
        }
    }

    /// Applies a sensor value that arrived under `key`, provided the key is
    /// still valid. Returns the new actuator state.
    pub fn sensor_report(&mut self, key: KeyId, key_valid: bool, value: i64) -> Result<Switch, DeviceError> {
        match self.pair_key {
            None => return Err(DeviceError::NoKey),
            Some(k) if k != key || !key_valid => return Err(DeviceError::KeyInvalid(key)),
            Some(_) => {}
        }
        self.actuator_state = self.decide(value);
        Ok(self.actuator_state)
    }
}

#[derive(Debug, Clone)]
pub struct Rtu {
    pub device_id: DeviceId,
    pub ngw: PartyId,
    pub report_period_ms: u64,
    pub key: Option<KeyId>,
    walk: ReadingWalk,
}

impl Rtu {
    pub fn new(device_id: DeviceId, ngw: PartyId, seed: u64) -> Self {
        Rtu { device_id, ngw, report_period_ms: 15 * 60 * 1000, key: None, walk: ReadingWalk::new(seed) }
    }

    pub fn next_boundary(&self, after_ms: u64) -> u64 {
        next_multiple(after_ms, self.report_period_ms)
    }

    pub fn tick(&mut self, now_ms: u64) -> Option<u64> {
        (now_ms > 0 && now_ms.is_multiple_of(self.report_period_ms)).then(|| self.walk.advance())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meter() -> SmartMeter {
        SmartMeter::new(DeviceId::new("sm-1").unwrap(), DeviceId::new("hgw-1").unwrap(), 9)
    }

    fn run(sm: &mut SmartMeter, horizon: u64) -> Vec<MeterReading> {
        let mut t = 0;
        let mut out = sm.tick(0);
        loop {
            t = sm.next_boundary(t);
            if t > horizon {
                return out;
            }
            out.extend(sm.tick(t));
        }
    }

    #[test]
    fn one_hour_four_hf() {
        let r = run(&mut meter(), HOUR_MS);
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|m| m.stream == Stream::Hf));
    }

    #[test]
    fn one_week_one_lf() {
        let r = run(&mut meter(), WEEK_MS);
        assert_eq!(r.iter().filter(|m| m.stream == Stream::Lf).count(), 1);
        assert_eq!(r.iter().filter(|m| m.stream == Stream::Hf).count(), 4 * 168);
    }

    #[test]
    fn nothing_at_epoch() {
        assert!(meter().tick(0).is_empty());
        assert_eq!(meter().next_boundary(0), 900_000);
    }

    #[test]
    fn readings_are_monotone_and_seeded() {
        let a: Vec<_> = run(&mut meter(), 6 * HOUR_MS).into_iter().map(|m| m.register_wh).collect();
        let b: Vec<_> = run(&mut meter(), 6 * HOUR_MS).into_iter().map(|m| m.register_wh).collect();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn actuator_threshold_and_revocation() {
        let mut p = HanDevicePair::new(DeviceId::new("t").unwrap(), DeviceId::new("ac").unwrap(), 1);
        assert_eq!(p.sensor_report(KeyId(1), true, 30), Err(DeviceError::NoKey));
        p.pair_key = Some(KeyId(1));
        assert_eq!(p.sensor_report(KeyId(1), true, 30), Ok(Switch::On));
        assert_eq!(p.sensor_report(KeyId(1), true, 25), Ok(Switch::Off));
        p.actuator_state = Switch::On;
        assert_eq!(p.sensor_report(KeyId(1), false, 10), Err(DeviceError::KeyInvalid(KeyId(1))));
        assert_eq!(p.actuator_state, Switch::On);
    }

    #[test]
    fn rtu_period() {
        let mut r = Rtu::new(DeviceId::new("rtu").unwrap(), DeviceId::new("ngw").unwrap(), 3);
        assert!(r.tick(0).is_none());
        assert!(r.tick(900_000).is_some());
        assert!(r.tick(900_001).is_none());
    }
}
