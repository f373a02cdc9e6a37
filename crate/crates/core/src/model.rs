//! Shared domain types.
//!
//! Identifiers appear as strings in configuration files and are interned to
//! dense integers when a scenario is loaded. Every timestamp is relative to
//! the scenario epoch (t = 0).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default vehicle taxonomy. Stand-in for the unpublished detector label set.
pub const DEFAULT_CLASSES: [&str; 8] = [
    "two-wheeler",
    "three-wheeler",
    "sedan",
    "suv",
    "hatchback",
    "bus",
    "truck",
    "van",
];

/// Class mix used when a traffic profile does not give one. Sums to 1.
pub const DEFAULT_CLASS_MIX: [f64; 8] = [0.37, 0.14, 0.15, 0.10, 0.12, 0.04, 0.05, 0.03];

macro_rules! dense_id {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}#{}", stringify!($name), self.0)
            }
        }
    };
}

dense_id!(
    /// Dense stream index. Each stream is one camera, so this doubles as the camera id.
    StreamId
);
dense_id!(
    /// Dense device index, assigned in ascending order of the configured device id string.
    DeviceId
);
dense_id!(
    /// Dense vertex index in the road graph.
    JunctionId
);

/// Cameras and streams are one-to-one.
pub type CameraId = StreamId;

/// Index into the configured class list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleClass(pub u16);

impl VehicleClass {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// The run's class taxonomy. Indices are dense `0..len()` and fixed for a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassList {
    names: Vec<String>,
}

impl ClassList {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, class: VehicleClass) -> &str {
        &self.names[class.index()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn lookup(&self, name: &str) -> Option<VehicleClass> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| VehicleClass(i as u16))
    }
}

impl Default for ClassList {
    fn default() -> Self {
        Self::new(DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect())
    }
}

/// Normalized bounding box; `x + w <= 1` and `y + h <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn is_valid(&self) -> bool {
        let non_neg = self.x >= 0.0 && self.y >= 0.0 && self.w >= 0.0 && self.h >= 0.0;
        non_neg && self.x + self.w <= 1.0 && self.y + self.h <= 1.0
    }
}

/// One per-frame, per-vehicle observation from the detection and tracking stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub stream_id: StreamId,
    pub ts_ms: u64,
    pub tracking_id: u64,
    pub class: VehicleClass,
    pub bbox: BBox,
}

/// Per-camera, per-second count of vehicles first observed in that second.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub ts_s: u64,
    pub camera_id: CameraId,
    pub counts: Vec<u32>,
}

impl FlowRecord {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDescriptor {
    pub stream_id: StreamId,
    pub name: String,
    pub junction_id: JunctionId,
    pub fps: u32,
    pub trace_seed: u64,
}

impl StreamDescriptor {
    /// Frame period in whole milliseconds (exact for the usual 25 FPS).
    pub fn frame_ts_ms(&self, frame: u64) -> u64 {
        frame * 1000 / self.fps as u64
    }
}

/// Bidirectional string <-> dense index map for one identifier namespace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    /// Returns `None` if `name` was already present.
    pub fn insert(&mut self, name: &str) -> Option<u32> {
        if self.index.contains_key(name) {
            return None;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Some(id)
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_classes_cover_the_dominant_mix() {
        let classes = ClassList::default();
        assert_eq!(classes.len(), 8);
        for name in ["two-wheeler", "sedan", "three-wheeler"] {
            assert!(classes.lookup(name).is_some(), "{name}");
        }
        let sum: f64 = DEFAULT_CLASS_MIX.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interner_rejects_duplicates() {
        let mut i = Interner::default();
        assert_eq!(i.insert("a"), Some(0));
        assert_eq!(i.insert("b"), Some(1));
        assert_eq!(i.insert("a"), None);
        assert_eq!(i.get("b"), Some(1));
        assert_eq!(i.name(0), "a");
    }

    #[test]
    fn bbox_bounds() {
        assert!(BBox { x: 0.5, y: 0.5, w: 0.5, h: 0.5 }.is_valid());
        assert!(!BBox { x: 0.6, y: 0.5, w: 0.5, h: 0.1 }.is_valid());
        assert!(!BBox { x: -0.1, y: 0.5, w: 0.1, h: 0.1 }.is_valid());
    }

    #[test]
    fn frame_timestamps_at_25_fps() {
        let d = StreamDescriptor {
            stream_id: StreamId(0),
            name: "c".into(),
            junction_id: JunctionId(0),
            fps: 25,
            trace_seed: 1,
        };
        assert_eq!(d.frame_ts_ms(1), 40);
        assert_eq!(d.frame_ts_ms(25), 1000);
    }
}
