//! Scenario files: parsing, validation and resolution to dense runtime ids.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::emulator::TrafficProcess;
use crate::fl::FlConfig;
use crate::forecast::GruConfig;
use crate::graph::{coarsen, AllocationConfig, CoarseGraph, RoadGraph, RoadGraphSpec, Thresholds};
use crate::model::{ClassList, StreamDescriptor, StreamId};
use crate::rng;
use crate::scheduler::{DeviceProfile, Fleet, PlacementPolicy};
use crate::worker::AggregatorConfig;

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("neighborhood100", include_str!("../../../scenarios/neighborhood100.json")),
    ("powercal", include_str!("../../../scenarios/powercal.json")),
];

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at line {line}, column {column}, field `{field}`: {message}")]
    Parse { line: usize, column: usize, field: String, message: String },
    #[error("{kind} `{name}` referenced by {from} does not exist")]
    Reference { kind: &'static str, name: String, from: String },
    #[error("duplicate {kind} id `{name}`")]
    Duplicate { kind: &'static str, name: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown scenario `{0}`; pass a path or one of the bundled names")]
    UnknownName(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: u64,
    #[serde(default = "default_classes")]
    pub classes: Vec<String>,
    /// Named traffic profiles streams refer to.
    pub profiles: BTreeMap<String, TrafficProcess>,
    pub streams: Vec<StreamConfig>,
    pub devices: Vec<DeviceProfile>,
    pub road_graph: RoadGraphSpec,
    #[serde(default)]
    pub intervals: Intervals,
    /// Absent: calibrated from edge flows of the synthetic training history.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub congestion_thresholds: Option<Thresholds>,
    #[serde(default)]
    pub allocation: AllocationConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl: Option<FlConfig>,
}

fn default_classes() -> Vec<String> {
    crate::model::DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub id: String,
    pub junction: String,
    #[serde(default = "default_fps")]
    pub fps: u32,
    pub profile: String,
    /// Multiplies the profile's rates.
    #[serde(default = "one")]
    pub rate_scale: f64,
    /// Shifts the profile's diurnal phase.
    #[serde(default)]
    pub phase_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_seed: Option<u64>,
}

fn default_fps() -> u32 {
    25
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intervals {
    #[serde(default = "default_window")]
    pub window_s: u32,
    #[serde(default = "default_lateness")]
    pub lateness_ms: u64,
    #[serde(default = "default_forecast_period")]
    pub forecast_period_s: u64,
    #[serde(default = "default_metrics_period")]
    pub metrics_period_ms: u64,
}

fn default_window() -> u32 {
    15
}
fn default_lateness() -> u64 {
    2000
}
fn default_forecast_period() -> u64 {
    5
}
fn default_metrics_period() -> u64 {
    1000
}

impl Default for Intervals {
    fn default() -> Self {
        Self {
            window_s: default_window(),
            lateness_ms: default_lateness(),
            forecast_period_s: default_forecast_period(),
            metrics_period_ms: default_metrics_period(),
        }
    }
}

impl Intervals {
    pub fn aggregator(&self) -> AggregatorConfig {
        AggregatorConfig { window_len_s: self.window_s, lateness_ms: self.lateness_ms, ..Default::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(default)]
    pub policy: PlacementPolicy,
    /// Queue rejected starts and retry them when capacity frees up.
    #[serde(default)]
    pub admission_queue: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    HistoricalAverage,
    SeasonalNaive,
    #[default]
    GraphGruLite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default = "five")]
    pub lag_minutes: u32,
    #[serde(default = "five")]
    pub horizon_minutes: u32,
    /// Synthetic history used for training, in minutes.
    #[serde(default = "default_train")]
    pub train_minutes: u32,
    /// Held-out synthetic segment used for evaluation, in minutes.
    #[serde(default = "default_test")]
    pub test_minutes: u32,
    #[serde(default)]
    pub gru: GruConfig,
}

fn five() -> u32 {
    5
}
fn default_train() -> u32 {
    360
}
fn default_test() -> u32 {
    120
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::default(),
            lag_minutes: 5,
            horizon_minutes: 5,
            train_minutes: default_train(),
            test_minutes: default_test(),
            gru: GruConfig::default(),
        }
    }
}

/// A validated scenario with dense ids resolved.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub classes: ClassList,
    /// Indexed by `StreamId`, in file order.
    pub streams: Vec<StreamDescriptor>,
    /// Traffic process of each stream after scaling.
    pub processes: Vec<TrafficProcess>,
    pub fleet: Fleet,
    pub road: RoadGraph,
    pub coarse: CoarseGraph,
    /// Streams observing each coarse vertex.
    pub vertex_streams: Vec<Vec<StreamId>>,
}

impl Scenario {
    pub fn stream_by_name(&self, name: &str) -> Option<StreamId> {
        self.streams.iter().find(|s| s.name == name).map(|s| s.stream_id)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn duration_s(&self) -> u64 {
        self.config.duration_s
    }
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        ScenarioError::Parse { line: inner.line(), column: inner.column(), field, message: inner.to_string() }
    })
}

/// Reads a scenario by path, or by bundled name when no such file exists.
pub fn load_scenario(path_or_name: &str) -> Result<Scenario, ScenarioError> {
    let path = Path::new(path_or_name);
    let text = if path.exists() {
        std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path_or_name.into(), source })?
    } else {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == path_or_name)
            .map(|(_, t)| t.to_string())
            .ok_or_else(|| ScenarioError::UnknownName(path_or_name.into()))?
    };
    resolve(parse_scenario(&text)?)
}

fn unique<'a>(kind: &'static str, ids: impl IntoIterator<Item = &'a str>) -> Result<(), ScenarioError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(ScenarioError::Duplicate { kind, name: id.to_string() });
        }
    }
    Ok(())
}

/// Validates cross-references and builds the runtime view.
pub fn resolve(config: ScenarioConfig) -> Result<Scenario, ScenarioError> {
    if config.duration_s == 0 {
        return Err(ScenarioError::Invalid("duration_s must be positive".into()));
    }
    if config.classes.is_empty() {
        return Err(ScenarioError::Invalid("class list is empty".into()));
    }
    unique("class", config.classes.iter().map(String::as_str))?;
    unique("stream", config.streams.iter().map(|s| s.id.as_str()))?;
    unique("device", config.devices.iter().map(|d| d.device_id.as_str()))?;
    unique("junction", config.road_graph.vertices.iter().map(|v| v.id.as_str()))?;
    let n_classes = config.classes.len();
    for (name, p) in &config.profiles {
        p.validate(n_classes).map_err(|e| ScenarioError::Invalid(format!("profile {name}: {e}")))?;
    }

    let road = RoadGraph::from_spec(&config.road_graph).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let coarse = coarsen(&road).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let fleet = Fleet::new(config.devices.clone()).map_err(|e| ScenarioError::Invalid(e.to_string()))?;

    let mut streams = Vec::with_capacity(config.streams.len());
    let mut processes = Vec::with_capacity(config.streams.len());
    let mut vertex_streams = vec![Vec::new(); coarse.len()];
    for (i, s) in config.streams.iter().enumerate() {
        let from = format!("stream `{}`", s.id);
        let j = road.lookup(&s.junction).ok_or_else(|| ScenarioError::Reference {
            kind: "junction",
            name: s.junction.clone(),
            from: from.clone(),
        })?;
        if !road.has_camera(j) {
            return Err(ScenarioError::Invalid(format!("{from} sits on junction `{}` which has no camera", s.junction)));
        }
        let profile = config.profiles.get(&s.profile).ok_or_else(|| ScenarioError::Reference {
            kind: "profile",
            name: s.profile.clone(),
            from: from.clone(),
        })?;
        if s.fps == 0 {
            return Err(ScenarioError::Invalid(format!("{from}: fps must be positive")));
        }
        if !(s.rate_scale >= 0.0 && s.rate_scale.is_finite()) {
            return Err(ScenarioError::Invalid(format!("{from}: rate_scale must be non-negative")));
        }
        let id = StreamId(i as u32);
        streams.push(StreamDescriptor {
            stream_id: id,
            name: s.id.clone(),
            junction_id: j,
            fps: s.fps,
            trace_seed: s.trace_seed.unwrap_or_else(|| rng::derive_seed(config.seed, i as u64)),
        });
        processes.push(profile.scaled(s.rate_scale, s.phase_s));
        vertex_streams[coarse.index_of(j).expect("camera junction")].push(id);
    }
    if let Some(t) = &config.congestion_thresholds {
        t.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    }
    if let Some(fl) = &config.fl {
        fl.validate().map_err(|e| ScenarioError::Invalid(format!("fl: {e}")))?;
    }
    let f = &config.forecast;
    if f.lag_minutes == 0 || f.horizon_minutes == 0 || f.train_minutes < f.lag_minutes + f.horizon_minutes {
        return Err(ScenarioError::Invalid("forecast lag/horizon/train_minutes are inconsistent".into()));
    }
    let w = config.intervals.window_s;
    if !(crate::worker::MIN_WINDOW_S..=crate::worker::MAX_WINDOW_S).contains(&w) {
        return Err(ScenarioError::Invalid(format!("intervals.window_s {w} outside 5..=30")));
    }
    Ok(Scenario {
        classes: ClassList::new(config.classes.clone()),
        streams,
        processes,
        fleet,
        road,
        coarse,
        vertex_streams,
        config,
    })
}
