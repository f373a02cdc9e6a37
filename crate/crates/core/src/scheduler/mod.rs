//! Capacity-aware placement of camera streams onto edge devices.
//!
//! Devices are bins sized by their profiled FPS capacity and a stream's FPS
//! is the item weight. Placement follows arrival order; nothing already
//! placed is ever moved.

mod metrics;
mod sweep;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metrics::{metrics, SchedulerMetrics};
pub use sweep::{sweep, write_sweep_csv, SweepRow};

use crate::model::{DeviceId, StreamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    #[serde(rename = "id")]
    pub device_id: String,
    #[serde(rename = "model")]
    pub model_name: String,
    pub fps_capacity: u32,
    pub tops: f64,
    pub power_idle_w: f64,
    pub power_per_fps_w: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulerError {
    #[error("no device can host {fps} more FPS")]
    CapacityExhausted { fps: u32 },
    #[error("stream {0} is not placed")]
    UnknownStream(StreamId),
    #[error("stream {0} is already placed")]
    AlreadyPlaced(StreamId),
    #[error("invalid device {id}: {reason}")]
    InvalidDevice { id: String, reason: &'static str },
    #[error("duplicate device id {0}")]
    DuplicateDevice(String),
    #[error("step {step}: {source}")]
    Sweep {
        step: usize,
        #[source]
        source: Box<SchedulerError>,
    },
}

/// Device profiles indexed by [`DeviceId`], sorted by ascending id string so
/// that the dense index order is the tie-break order.
#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    devices: Vec<DeviceProfile>,
}

impl Fleet {
    pub fn new(mut devices: Vec<DeviceProfile>) -> Result<Self, SchedulerError> {
        devices.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        for w in devices.windows(2) {
            if w[0].device_id == w[1].device_id {
                return Err(SchedulerError::DuplicateDevice(w[0].device_id.clone()));
            }
        }
        for d in &devices {
            let bad = |reason| SchedulerError::InvalidDevice { id: d.device_id.clone(), reason };
            if d.fps_capacity == 0 {
                return Err(bad("fps_capacity must be positive"));
            }
            if !(d.tops > 0.0) {
                return Err(bad("tops must be positive"));
            }
            if !(d.power_idle_w >= 0.0 && d.power_per_fps_w >= 0.0) {
                return Err(bad("power values must be non-negative"));
            }
        }
        Ok(Self { devices })
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn device(&self, id: DeviceId) -> &DeviceProfile {
        &self.devices[id.index()]
    }

    pub fn devices(&self) -> &[DeviceProfile] {
        &self.devices
    }

    pub fn lookup(&self, name: &str) -> Option<DeviceId> {
        self.devices
            .binary_search_by(|d| d.device_id.as_str().cmp(name))
            .ok()
            .map(|i| DeviceId(i as u32))
    }

    pub fn total_capacity(&self) -> u64 {
        self.devices.iter().map(|d| d.fps_capacity as u64).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = DeviceId> {
        (0..self.devices.len() as u32).map(DeviceId)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PlacementPolicy {
    #[default]
    #[value(name = "bestfit")]
    BestFit,
    #[value(name = "worstfit")]
    WorstFit,
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlacementPolicy::BestFit => "bestfit",
            PlacementPolicy::WorstFit => "worstfit",
        })
    }
}

impl FromStr for PlacementPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bestfit" | "best_fit" | "best-fit" => Ok(Self::BestFit),
            "worstfit" | "worst_fit" | "worst-fit" => Ok(Self::WorstFit),
            other => Err(format!("unknown placement policy {other:?}")),
        }
    }
}

/// Current stream-to-device assignment.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Placement {
    assignments: BTreeMap<StreamId, (DeviceId, u32)>,
    used_fps: Vec<u32>,
    streams_on: Vec<u32>,
}

impl Placement {
    pub fn new(fleet: &Fleet) -> Self {
        Self {
            assignments: BTreeMap::new(),
            used_fps: vec![0; fleet.len()],
            streams_on: vec![0; fleet.len()],
        }
    }

    pub fn used_fps(&self, d: DeviceId) -> u32 {
        self.used_fps[d.index()]
    }

    pub fn remaining(&self, fleet: &Fleet, d: DeviceId) -> u32 {
        fleet.device(d).fps_capacity - self.used_fps[d.index()]
    }

    pub fn is_active(&self, d: DeviceId) -> bool {
        self.streams_on[d.index()] > 0
    }

    pub fn active_devices(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.streams_on
            .iter()
            .enumerate()
            .filter(|(_, n)| **n > 0)
            .map(|(i, _)| DeviceId(i as u32))
    }

    pub fn device_of(&self, s: StreamId) -> Option<DeviceId> {
        self.assignments.get(&s).map(|(d, _)| *d)
    }

    pub fn assignments(&self) -> impl Iterator<Item = (StreamId, DeviceId, u32)> + '_ {
        self.assignments.iter().map(|(s, (d, fps))| (*s, *d, *fps))
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Devices that can take `fps` more, in id order.
    pub fn feasible<'a>(&'a self, fleet: &'a Fleet, fps: u32) -> impl Iterator<Item = DeviceId> + 'a {
        fleet.ids().filter(move |d| self.remaining(fleet, *d) >= fps)
    }

    /// Picks the device `policy` would use for a stream of `fps`.
    pub fn choose(&self, fleet: &Fleet, fps: u32, policy: PlacementPolicy) -> Option<DeviceId> {
        // `min_by_key`/`max_by_key` return the first/last extremum respectively,
        // so fold explicitly to keep the lowest id on ties for both policies.
        let mut best: Option<(DeviceId, u32)> = None;
        for d in self.feasible(fleet, fps) {
            let rem = self.remaining(fleet, d);
            let better = match (best, policy) {
                (None, _) => true,
                (Some((_, r)), PlacementPolicy::BestFit) => rem < r,
                (Some((_, r)), PlacementPolicy::WorstFit) => rem > r,
            };
            if better {
                best = Some((d, rem));
            }
        }
        best.map(|(d, _)| d)
    }

    /// Places `stream`; on error the placement is unchanged.
    pub fn assign(
        &mut self,
        fleet: &Fleet,
        stream: StreamId,
        fps: u32,
        policy: PlacementPolicy,
    ) -> Result<DeviceId, SchedulerError> {
        if self.assignments.contains_key(&stream) {
            return Err(SchedulerError::AlreadyPlaced(stream));
        }
        let d = self
            .choose(fleet, fps, policy)
            .ok_or(SchedulerError::CapacityExhausted { fps })?;
        self.assignments.insert(stream, (d, fps));
        self.used_fps[d.index()] += fps;
        self.streams_on[d.index()] += 1;
        Ok(d)
    }

    pub fn remove(&mut self, stream: StreamId) -> Result<DeviceId, SchedulerError> {
        let (d, fps) = self
            .assignments
            .remove(&stream)
            .ok_or(SchedulerError::UnknownStream(stream))?;
        self.used_fps[d.index()] -= fps;
        self.streams_on[d.index()] -= 1;
        Ok(d)
    }

    /// Checks the capacity and bookkeeping invariants against `fleet`.
    pub fn check(&self, fleet: &Fleet) -> Result<(), String> {
        let mut used = vec![0u32; fleet.len()];
        let mut count = vec![0u32; fleet.len()];
        for (_, d, fps) in self.assignments() {
            used[d.index()] += fps;
            count[d.index()] += 1;
        }
        for d in fleet.ids() {
            let cap = fleet.device(d).fps_capacity;
            if used[d.index()] != self.used_fps[d.index()] || count[d.index()] != self.streams_on[d.index()] {
                return Err(format!("bookkeeping drift on {}", fleet.device(d).device_id));
            }
            if used[d.index()] > cap {
                return Err(format!("{} over capacity: {} > {cap}", fleet.device(d).device_id, used[d.index()]));
            }
        }
        Ok(())
    }
}

/// Value-returning form of [`Placement::assign`].
pub fn assign_stream(
    p: &Placement,
    fleet: &Fleet,
    stream: StreamId,
    fps: u32,
    policy: PlacementPolicy,
) -> Result<Placement, SchedulerError> {
    let mut next = p.clone();
    next.assign(fleet, stream, fps, policy)?;
    Ok(next)
}

pub fn remove_stream(p: &Placement, stream: StreamId) -> Result<Placement, SchedulerError> {
    let mut next = p.clone();
    next.remove(stream)?;
    Ok(next)
}

/// The default testbed: five 200-FPS and four 400-FPS devices with the
/// calibrated affine power table.
pub fn default_fleet() -> Fleet {
    let small = (1..=5).map(|i| DeviceProfile {
        device_id: format!("jo32-{i}"),
        model_name: "orin-agx-32gb".into(),
        fps_capacity: 200,
        tops: 200.0,
        power_idle_w: 22.4,
        power_per_fps_w: 0.2,
    });
    let large = (1..=4).map(|i| DeviceProfile {
        device_id: format!("jo64-{i}"),
        model_name: "orin-agx-64gb".into(),
        fps_capacity: 400,
        tops: 275.0,
        power_idle_w: 25.9,
        power_per_fps_w: 0.16,
    });
    Fleet::new(small.chain(large).collect()).expect("static fleet is valid")
}
