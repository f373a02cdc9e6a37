//! Live replay of an emulated stream at its native frame cadence.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio::time::Instant;

use super::{StreamTrace, TrafficProcess};
use crate::model::{DetectionEvent, StreamDescriptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Pacing {
    /// Frames are released at `ts_ms` relative to the start of the replay.
    Realtime,
    /// Same frames and timestamps, no waiting.
    Fast,
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub pacing: Pacing,
    /// Frames the consumer may fall behind before back-pressure is signalled.
    pub watermark_frames: usize,
    /// Release-time deviation above which a frame counts as a jitter violation.
    pub max_jitter: Duration,
    pub duration_s: f64,
    /// Frames before this one are generated but not released; pacing starts here.
    pub start_frame: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            pacing: Pacing::Realtime,
            watermark_frames: 250,
            max_jitter: Duration::from_millis(20),
            duration_s: 60.0,
            start_frame: 0,
        }
    }
}

/// All detections of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub frame: u64,
    pub ts_ms: u64,
    pub events: Vec<DetectionEvent>,
}

#[derive(Debug, Default)]
pub struct ServeStats {
    pub frames_sent: AtomicU64,
    pub backpressure_signals: AtomicU64,
    pub jitter_violations: AtomicU64,
    pub max_jitter_us: AtomicU64,
    pub backpressured: AtomicBool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ServeError {
    #[error("consumer lags by more than {watermark} frames")]
    BackPressure { watermark: usize },
}

pub struct StreamServer {
    pub frames: mpsc::Receiver<FrameBatch>,
    pub stats: Arc<ServeStats>,
    stop: Arc<AtomicBool>,
    watermark: usize,
    task: JoinHandle<()>,
}

impl StreamServer {
    /// Err while the producer is stalled on a full channel.
    pub fn check(&self) -> Result<(), ServeError> {
        if self.stats.backpressured.load(Ordering::Relaxed) {
            Err(ServeError::BackPressure { watermark: self.watermark })
        } else {
            Ok(())
        }
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }

    pub async fn join(self) {
        let _ = self.task.await;
    }
}

/// Starts replaying `desc` on the current tokio runtime.
pub fn serve(desc: &StreamDescriptor, process: &TrafficProcess, cfg: ServeConfig) -> StreamServer {
    let (tx, rx) = mpsc::channel(cfg.watermark_frames.max(1));
    let stats = Arc::new(ServeStats::default());
    let stop = Arc::new(AtomicBool::new(false));
    let mut trace = StreamTrace::new(desc, process, cfg.duration_s);
    let task_stats = stats.clone();
    let task_stop = stop.clone();
    let desc = desc.clone();
    let task = tokio::spawn(async move {
        let epoch = Instant::now();
        let offset_ms = desc.frame_ts_ms(cfg.start_frame);
        while let Some((frame, obs)) = trace.next_frame() {
            if task_stop.load(Ordering::Relaxed) {
                break;
            }
            if frame < cfg.start_frame {
                continue;
            }
            let ts_ms = desc.frame_ts_ms(frame);
            if cfg.pacing == Pacing::Realtime {
                let due = epoch + Duration::from_millis(ts_ms - offset_ms);
                tokio::time::sleep_until(due).await;
                let late = Instant::now().saturating_duration_since(due);
                let us = late.as_micros() as u64;
                task_stats.max_jitter_us.fetch_max(us, Ordering::Relaxed);
                if late > cfg.max_jitter {
                    task_stats.jitter_violations.fetch_add(1, Ordering::Relaxed);
                }
            }
            let batch = FrameBatch { frame, ts_ms, events: obs.into_iter().map(|(e, _)| e).collect() };
            let batch = match tx.try_send(batch) {
                Ok(()) => None,
                Err(mpsc::error::TrySendError::Full(b)) => Some(b),
                Err(mpsc::error::TrySendError::Closed(_)) => break,
            };
            if let Some(batch) = batch {
                task_stats.backpressure_signals.fetch_add(1, Ordering::Relaxed);
                task_stats.backpressured.store(true, Ordering::Relaxed);
                tracing::debug!(stream = %desc.name, frame, "consumer behind watermark");
                if tx.send(batch).await.is_err() {
                    break;
                }
                task_stats.backpressured.store(false, Ordering::Relaxed);
            }
            task_stats.frames_sent.fetch_add(1, Ordering::Relaxed);
        }
    });
    StreamServer { frames: rx, stats, stop, watermark: cfg.watermark_frames, task }
}
