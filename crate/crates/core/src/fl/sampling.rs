use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::emulator::FrameRef;
use crate::model::StreamDescriptor;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_window")]
    pub window_s: f64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    /// Overrides `window_s` with `duration_s / target_frames`.
    #[serde(default)]
    pub target_frames: Option<u32>,
}

fn default_window() -> f64 {
    20.0
}

fn default_duration() -> f64 {
    150.0 * 60.0
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { window_s: default_window(), duration_s: default_duration(), target_frames: None }
    }
}

impl SamplingConfig {
    pub fn effective_window_s(&self) -> f64 {
        match self.target_frames {
            Some(n) if n > 0 => self.duration_s / n as f64,
            _ => self.window_s,
        }
    }

    pub fn frames_per_stream(&self) -> usize {
        match self.target_frames {
            Some(n) if n > 0 => n as usize,
            _ => (self.duration_s / self.window_s + 1e-9).floor() as usize,
        }
    }
}

/// One uniformly chosen frame per non-overlapping window, in time order.
pub fn stratified_sample(desc: &StreamDescriptor, cfg: &SamplingConfig, seed: u64) -> Vec<FrameRef> {
    let window = cfg.effective_window_s();
    let fps = desc.fps as f64;
    let total_frames = (cfg.duration_s * fps).floor() as u64;
    let mut rng = rng::rng_for(seed, rng::derive_seed(rng::label_salt("sample"), desc.stream_id.0 as u64));
    (0..cfg.frames_per_stream())
        .filter_map(|w| {
            let lo = ((w as f64 * window) * fps).ceil() as u64;
            let hi = (((w + 1) as f64 * window) * fps).ceil().min(total_frames as f64) as u64;
            (lo < hi).then(|| {
                let frame = rng.gen_range(lo..hi);
                FrameRef { stream_id: desc.stream_id, frame, ts_ms: desc.frame_ts_ms(frame) }
            })
        })
        .collect()
}
