use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{metrics, Fleet, Placement, PlacementPolicy, SchedulerError, SchedulerMetrics};
use crate::model::StreamId;

/// One row of the sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub step: usize,
    pub n_streams: usize,
    pub policy: PlacementPolicy,
    pub cumulative_fps: u64,
    pub active_capacity_tops: f64,
    pub utilization_pct: f64,
    pub total_power_w: f64,
}

impl SweepRow {
    fn new(step: usize, n_streams: usize, policy: PlacementPolicy, m: &SchedulerMetrics) -> Self {
        Self {
            step,
            n_streams,
            policy,
            cumulative_fps: m.cumulative_fps,
            active_capacity_tops: m.active_capacity_tops,
            utilization_pct: m.utilization_pct,
            total_power_w: m.total_power_w,
        }
    }
}

/// Replays sequential arrivals of `fps`-sized streams and records metrics
/// whenever the placed count reaches the next entry of `stream_counts`.
/// Also returns the per-step full metrics for callers that need more columns.
pub fn sweep(
    fleet: &Fleet,
    stream_counts: &[usize],
    fps: u32,
    policy: PlacementPolicy,
) -> Result<Vec<(SweepRow, SchedulerMetrics)>, SchedulerError> {
    debug_assert!(stream_counts.windows(2).all(|w| w[0] <= w[1]));
    let mut p = Placement::new(fleet);
    let mut rows = Vec::with_capacity(stream_counts.len());
    let mut placed = 0usize;
    for (step, &target) in stream_counts.iter().enumerate() {
        while placed < target {
            p.assign(fleet, StreamId(placed as u32), fps, policy)
                .map_err(|e| SchedulerError::Sweep { step, source: Box::new(e) })?;
            placed += 1;
        }
        let m = metrics(&p, fleet);
        rows.push((SweepRow::new(step, target, policy, &m), m));
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
