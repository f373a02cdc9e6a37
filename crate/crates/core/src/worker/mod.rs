//! Edge-side flow summarization.
//!
//! A vehicle counts once, in the second its tracking id is first observed on
//! a camera. Seconds are batched into fixed windows aligned to the scenario
//! epoch; a window is emitted once the watermark (largest timestamp seen
//! minus the lateness allowance) passes its end. Events older than the
//! watermark are dropped and counted.

pub mod emit;

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::{CameraId, DetectionEvent, FlowRecord};

pub const MIN_WINDOW_S: u32 = 5;
pub const MAX_WINDOW_S: u32 = 30;

/// Per-second unique-vehicle counts of one camera over one window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub camera_id: CameraId,
    pub window_start_s: u64,
    pub window_len_s: u32,
    pub rows: Vec<FlowRecord>,
}

impl FlowSummary {
    pub fn is_well_formed(&self, n_classes: usize) -> bool {
        self.rows.len() == self.window_len_s as usize
            && self.rows.iter().enumerate().all(|(i, r)| {
                r.ts_s == self.window_start_s + i as u64
                    && r.camera_id == self.camera_id
                    && r.counts.len() == n_classes
            })
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().map(FlowRecord::total).sum()
    }
}

/// JSON message sent from a worker to the ingest service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryMessage {
    pub camera_id: String,
    pub window_start_s: u64,
    pub window_len_s: u32,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub ts_s: u64,
    pub counts: Vec<u32>,
}

impl SummaryMessage {
    pub fn from_summary(s: &FlowSummary, camera_name: &str) -> Self {
        Self {
            camera_id: camera_name.to_string(),
            window_start_s: s.window_start_s,
            window_len_s: s.window_len_s,
            rows: s
                .rows
                .iter()
                .map(|r| SummaryRow { ts_s: r.ts_s, counts: r.counts.clone() })
                .collect(),
        }
    }

    pub fn into_summary(self, camera_id: CameraId) -> FlowSummary {
        FlowSummary {
            camera_id,
            window_start_s: self.window_start_s,
            window_len_s: self.window_len_s,
            rows: self
                .rows
                .into_iter()
                .map(|r| FlowRecord { ts_s: r.ts_s, camera_id, counts: r.counts })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregateError {
    #[error("window length {0} outside 5..=30 s")]
    WindowLength(u32),
    #[error("event at {ts_ms} ms is older than the watermark {watermark_ms} ms")]
    LateEvent { ts_ms: u64, watermark_ms: u64 },
    #[error("class index {0} out of range")]
    ClassOutOfRange(u16),
}

#[derive(Debug, Clone)]
pub struct AggregatorConfig {
    pub window_len_s: u32,
    pub lateness_ms: u64,
    /// How long a tracking id is remembered after its last observation.
    pub id_retention_ms: u64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self { window_len_s: 15, lateness_ms: 2000, id_retention_ms: 60_000 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Seen {
    first_ms: u64,
    last_ms: u64,
    class: u16,
}

/// Streaming first-seen counter for one camera.
#[derive(Debug)]
pub struct Aggregator {
    camera: CameraId,
    n_classes: usize,
    cfg: AggregatorConfig,
    /// Start of the oldest window not yet emitted.
    next_window_s: u64,
    /// Per-second counts starting at `next_window_s`.
    rows: VecDeque<Vec<u32>>,
    seen: HashMap<u64, Seen>,
    max_ts_ms: Option<u64>,
    late_events: u64,
    events: u64,
}

impl Aggregator {
    pub fn new(camera: CameraId, n_classes: usize, cfg: AggregatorConfig) -> Result<Self, AggregateError> {
        if !(MIN_WINDOW_S..=MAX_WINDOW_S).contains(&cfg.window_len_s) {
            return Err(AggregateError::WindowLength(cfg.window_len_s));
        }
        Ok(Self {
            camera,
            n_classes,
            cfg,
            next_window_s: 0,
            rows: VecDeque::new(),
            seen: HashMap::new(),
            max_ts_ms: None,
            late_events: 0,
            events: 0,
        })
    }

    /// Starts counting at the window containing `start_s` instead of at zero,
    /// for a camera that joins mid-run.
    pub fn starting_at(mut self, start_s: u64) -> Self {
        let len = self.cfg.window_len_s as u64;
        self.next_window_s = start_s / len * len;
        self
    }

    pub fn camera(&self) -> CameraId {
        self.camera
    }

    pub fn late_events(&self) -> u64 {
        self.late_events
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn watermark_ms(&self) -> u64 {
        self.max_ts_ms.map_or(0, |m| m.saturating_sub(self.cfg.lateness_ms))
    }

    fn row_mut(&mut self, sec: u64) -> &mut Vec<u32> {
        let idx = (sec - self.next_window_s) as usize;
        while self.rows.len() <= idx {
            self.rows.push_back(vec![0; self.n_classes]);
        }
        &mut self.rows[idx]
    }

    /// Feeds one event, appending any windows it closes to `out`.
    pub fn push(&mut self, e: &DetectionEvent, out: &mut Vec<FlowSummary>) -> Result<(), AggregateError> {
        if e.class.index() >= self.n_classes {
            return Err(AggregateError::ClassOutOfRange(e.class.0));
        }
        let watermark_ms = self.watermark_ms();
        let closed_ms = self.next_window_s * 1000;
        if (self.max_ts_ms.is_some() && e.ts_ms < watermark_ms) || e.ts_ms < closed_ms {
            self.late_events += 1;
            return Err(AggregateError::LateEvent { ts_ms: e.ts_ms, watermark_ms: watermark_ms.max(closed_ms) });
        }
        self.events += 1;
        let sec = e.ts_ms / 1000;
        match self.seen.get_mut(&e.tracking_id) {
            None => {
                self.seen.insert(
                    e.tracking_id,
                    Seen { first_ms: e.ts_ms, last_ms: e.ts_ms, class: e.class.0 },
                );
                self.row_mut(sec)[e.class.index()] += 1;
            }
            Some(s) => {
                s.last_ms = s.last_ms.max(e.ts_ms);
                if e.ts_ms < s.first_ms {
                    // Out-of-order but in time: move the vehicle to its earlier second.
                    let (old_sec, class) = (s.first_ms / 1000, s.class as usize);
                    s.first_ms = e.ts_ms;
                    if old_sec != sec {
                        self.row_mut(old_sec)[class] -= 1;
                        self.row_mut(sec)[class] += 1;
                    }
                }
            }
        }
        self.max_ts_ms = Some(self.max_ts_ms.map_or(e.ts_ms, |m| m.max(e.ts_ms)));
        self.close_until(self.watermark_ms(), out);
        Ok(())
    }

    /// Advances the watermark without an event, e.g. on an idle camera.
    pub fn advance_to(&mut self, ts_ms: u64, out: &mut Vec<FlowSummary>) {
        self.max_ts_ms = Some(self.max_ts_ms.map_or(ts_ms, |m| m.max(ts_ms)));
        self.close_until(self.watermark_ms(), out);
    }

    fn close_until(&mut self, watermark_ms: u64, out: &mut Vec<FlowSummary>) {
        let len = self.cfg.window_len_s as u64;
        let mut closed_any = false;
        while (self.next_window_s + len) * 1000 <= watermark_ms {
            out.push(self.pop_window());
            closed_any = true;
        }
        if closed_any {
            let horizon = watermark_ms.saturating_sub(self.cfg.id_retention_ms);
            self.seen.retain(|_, s| s.last_ms >= horizon);
        }
    }

    fn pop_window(&mut self) -> FlowSummary {
        let len = self.cfg.window_len_s;
        let start = self.next_window_s;
        let rows = (0..len as u64)
            .map(|i| FlowRecord {
                ts_s: start + i,
                camera_id: self.camera,
                counts: self.rows.pop_front().unwrap_or_else(|| vec![0; self.n_classes]),
            })
            .collect();
        self.next_window_s += len as u64;
        FlowSummary { camera_id: self.camera, window_start_s: start, window_len_s: len, rows }
    }

    /// Emits every window starting before `end_s`, regardless of the watermark.
    pub fn finish(&mut self, end_s: u64, out: &mut Vec<FlowSummary>) {
        while self.next_window_s < end_s {
            out.push(self.pop_window());
        }
    }
}

/// Batch form: aggregates an ordered event sequence over a trace of
/// `duration_s` seconds.
pub fn aggregate(
    events: &[DetectionEvent],
    camera: CameraId,
    n_classes: usize,
    cfg: AggregatorConfig,
    duration_s: u64,
) -> Result<(Vec<FlowSummary>, u64), AggregateError> {
    let mut agg = Aggregator::new(camera, n_classes, cfg)?;
    let mut out = Vec::new();
    for e in events {
        match agg.push(e, &mut out) {
            Ok(()) | Err(AggregateError::LateEvent { .. }) => {}
            Err(other) => return Err(other),
        }
    }
    agg.finish(duration_s, &mut out);
    Ok((out, agg.late_events()))
}
