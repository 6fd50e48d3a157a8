//! Network layout and link latencies.

use serde::{Deserialize, Serialize};

use crate::ledger::DeviceId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Latencies {
    pub han_hop_ms: i64,
    pub nan_hop_ms: i64,
    pub cellular_hop_ms: i64,
    pub wired_hop_ms: i64,
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies { han_hop_ms: 10, nan_hop_ms: 15, cellular_hop_ms: 50, wired_hop_ms: 20 }
    }
}

/// Kinds of link a message can cross.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// Device to home gateway.
    Han,
    /// Home gateway or RTU to neighborhood gateway.
    Nan,
    /// Neighborhood gateway to the control center or utility.
    Cellular,
    /// Neighborhood gateway to a storage miner.
    Wired,
}

impl Latencies {
    pub fn of(&self, link: Link) -> u64 {
        let v = match link {
            Link::Han => self.han_hop_ms,
            Link::Nan => self.nan_hop_ms,
            Link::Cellular => self.cellular_hop_ms,
            Link::Wired => self.wired_hop_ms,
        };
        v.max(0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub ngws: u32,
    pub hgws_per_ngw: u32,
    pub meters_per_hgw: u32,
    /// Sensor/actuator pairs per home; each pair is two devices.
    pub han_pairs_per_hgw: u32,
    pub rtus_per_ngw: u32,
    pub latency: Latencies,
    pub crypto_overhead_ms: i64,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            ngws: 2,
            hgws_per_ngw: 20,
            meters_per_hgw: 8,
            han_pairs_per_hgw: 1,
            rtus_per_ngw: 0,
            latency: Latencies::default(),
            crypto_overhead_ms: 20,
        }
    }
}

impl Topology {
    pub fn devices_per_hgw(&self) -> u32 {
        self.meters_per_hgw + 2 * self.han_pairs_per_hgw
    }

    pub fn device_count(&self) -> u32 {
        self.ngws * (self.hgws_per_ngw * self.devices_per_hgw() + self.rtus_per_ngw)
    }

    pub fn meter_count(&self) -> u32 {
        self.ngws * self.hgws_per_ngw * self.meters_per_hgw
    }

    pub fn overhead_ms(&self) -> u64 {
        self.crypto_overhead_ms.max(0) as u64
    }

    pub fn ngw_ids(&self) -> Vec<DeviceId> {
        (1..=self.ngws).map(ngw_id).collect()
    }
}

fn id(s: String) -> DeviceId {
    DeviceId::new(s).expect("generated ids are non-empty")
}

pub fn ngw_id(n: u32) -> DeviceId {
    id(format!("ngw-{n:02}"))
}

pub fn hgw_id(n: u32, h: u32) -> DeviceId {
    id(format!("hgw-{n:02}-{h:02}"))
}

pub fn meter_id(n: u32, h: u32, k: u32) -> DeviceId {
    id(format!("sm-{n:02}-{h:02}-{k:02}"))
}

pub fn sensor_id(n: u32, h: u32, p: u32) -> DeviceId {
    id(format!("sensor-{n:02}-{h:02}-{p}"))
}

pub fn actuator_id(n: u32, h: u32, p: u32) -> DeviceId {
    id(format!("actuator-{n:02}-{h:02}-{p}"))
}

pub fn rtu_id(n: u32, k: u32) -> DeviceId {
    id(format!("rtu-{n:02}-{k:02}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_400_devices() {
        let t = Topology::default();
        assert_eq!(t.devices_per_hgw(), 10);
        assert_eq!(t.device_count(), 400);
        assert_eq!(t.meter_count(), 320);
    }

    #[test]
    fn ids_sort_numerically() {
        assert!(ngw_id(2) < ngw_id(10));
        assert_eq!(meter_id(1, 2, 3).as_str(), "sm-01-02-03");
    }
}
