//! Fan-out of newly ingested seconds to live subscribers.
//!
//! Publishing never blocks: frames go into a bounded broadcast ring and a
//! subscriber that falls further behind than the ring is cut off with
//! [`SubscriberOverflow`].

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::model::CameraId;

/// Counts for one second, keyed by camera. A frame carries the latest value
/// for each listed (camera, second); consumers keep the newest per key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NowcastFrame {
    pub seq: u64,
    pub ts_s: u64,
    pub per_camera: BTreeMap<CameraId, Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("subscriber fell {missed} frames behind and was disconnected")]
pub struct SubscriberOverflow {
    pub missed: u64,
}

pub struct NowcastHub {
    tx: broadcast::Sender<NowcastFrame>,
    seq: AtomicU64,
    buffer: usize,
}

impl NowcastHub {
    pub fn new(buffer: usize) -> Self {
        let (tx, _) = broadcast::channel(buffer.max(1));
        Self { tx, seq: AtomicU64::new(0), buffer: buffer.max(1) }
    }

    pub fn buffer(&self) -> usize {
        self.buffer
    }

    pub fn subscribers(&self) -> usize {
        self.tx.receiver_count()
    }

    /// One frame per second in `rows`.
    pub fn publish(&self, camera: CameraId, rows: impl IntoIterator<Item = (u64, Vec<u32>)>) {
        for (ts_s, counts) in rows {
            let seq = self.seq.fetch_add(1, Ordering::Relaxed);
            let mut per_camera = BTreeMap::new();
            per_camera.insert(camera, counts);
            // No receivers is fine.
            let _ = self.tx.send(NowcastFrame { seq, ts_s, per_camera });
        }
    }

    /// An empty camera list subscribes to all cameras.
    pub fn subscribe(&self, cameras: &[CameraId]) -> NowcastSubscription {
        NowcastSubscription {
            rx: self.tx.subscribe(),
            filter: cameras.iter().copied().collect(),
            closed: false,
        }
    }
}

pub struct NowcastSubscription {
    rx: broadcast::Receiver<NowcastFrame>,
    filter: HashSet<CameraId>,
    closed: bool,
}

impl NowcastSubscription {
    /// Next frame touching a subscribed camera. `Ok(None)` once the hub is
    /// gone; after an overflow every call returns the overflow error.
    pub async fn next(&mut self) -> Result<Option<NowcastFrame>, SubscriberOverflow> {
        if self.closed {
            return Err(SubscriberOverflow { missed: 0 });
        }
        loop {
            match self.rx.recv().await {
                Ok(mut frame) => {
                    if !self.filter.is_empty() {
                        frame.per_camera.retain(|c, _| self.filter.contains(c));
                        if frame.per_camera.is_empty() {
                            continue;
                        }
                    }
                    return Ok(Some(frame));
                }
                Err(broadcast::error::RecvError::Lagged(missed)) => {
                    self.closed = true;
                    return Err(SubscriberOverflow { missed });
                }
                Err(broadcast::error::RecvError::Closed) => return Ok(None),
            }
        }
    }

    /// Non-blocking variant of [`next`](Self::next); `Ok(None)` when nothing is queued.
    pub fn try_next(&mut self) -> Result<Option<NowcastFrame>, SubscriberOverflow> {
        if self.closed {
            return Err(SubscriberOverflow { missed: 0 });
        }
        loop {
            match self.rx.try_recv() {
                Ok(mut frame) => {
                    if !self.filter.is_empty() {
                        frame.per_camera.retain(|c, _| self.filter.contains(c));
                        if frame.per_camera.is_empty() {
                            continue;
                        }
                    }
                    return Ok(Some(frame));
                }
                Err(broadcast::error::TryRecvError::Lagged(missed)) => {
                    self.closed = true;
                    return Err(SubscriberOverflow { missed });
                }
                Err(_) => return Ok(None),
            }
        }
    }
}
