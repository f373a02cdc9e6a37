//! Deterministic stand-in for the camera fleet plus detection and tracking.
//!
//! A stream's vehicles arrive as a time-inhomogeneous Poisson process
//! (Lewis-Shedler thinning against the rate bound) and each vehicle's class is
//! drawn from the profile's class mix. A vehicle is visible from the first
//! frame at or after its arrival for a sampled number of frames, with the
//! same tracking id and a linearly drifting, lightly jittered box.
//!
//! Arrival times and classes come from one seeded generator; each vehicle's
//! dwell and trajectory come from a generator seeded by (trace seed, tracking
//! id). That split lets [`arrivals`], [`StreamTrace`] and [`frames_at`] agree
//! on the same vehicles without materializing every frame.

mod process;
pub mod serve;
pub mod wire;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use process::{Diurnal, Dwell, Modulation, ProcessError, RateSegment, TrafficProcess};

use crate::model::{BBox, DetectionEvent, StreamDescriptor, StreamId, VehicleClass};
use crate::rng;

/// Tracking ids carry the stream index in the high bits so ids never collide
/// across streams either.
const STREAM_SHIFT: u32 = 40;

/// Position of a frame within a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub stream_id: StreamId,
    pub frame: u64,
    pub ts_ms: u64,
}

/// True class and noise-free box of one emitted observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub frame: FrameRef,
    pub tracking_id: u64,
    pub class: VehicleClass,
    pub bbox: BBox,
}

/// An arrival produced by the Poisson process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub tracking_id: u64,
    pub time_s: f64,
    pub first_frame: u64,
    pub class: VehicleClass,
}

/// A vehicle with its sampled dwell and trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vehicle {
    pub tracking_id: u64,
    pub class: VehicleClass,
    pub first_frame: u64,
    pub dwell: u32,
    x0: f32,
    y0: f32,
    w: f32,
    h: f32,
    vx: f32,
    vy: f32,
    noise_seed: u64,
}

/// Largest per-axis jitter added to emitted boxes.
const BBOX_JITTER: f32 = 0.004;

impl Vehicle {
    fn from_arrival(a: &Arrival, trace_seed: u64, dwell: &Dwell) -> Self {
        let mut r = rng::rng_for(trace_seed, a.tracking_id);
        let dwell = dwell.sample(&mut r);
        let w = r.gen_range(0.03f32..0.15);
        let h = r.gen_range(0.03f32..0.15);
        let x0 = r.gen_range(0.0..(1.0 - w));
        let y0 = r.gen_range(0.0..(1.0 - h));
        let vx = r.gen_range(-0.01f32..0.01);
        let vy = r.gen_range(-0.01f32..0.01);
        Self {
            tracking_id: a.tracking_id,
            class: a.class,
            first_frame: a.first_frame,
            dwell,
            x0,
            y0,
            w,
            h,
            vx,
            vy,
            noise_seed: rng::derive_seed(trace_seed ^ 0x5bd1_e995, a.tracking_id),
        }
    }

    pub fn last_frame(&self) -> u64 {
        self.first_frame + self.dwell as u64 - 1
    }

    pub fn visible_at(&self, frame: u64) -> bool {
        frame >= self.first_frame && frame <= self.last_frame()
    }

    /// Noise-free box at `frame`.
    pub fn true_bbox(&self, frame: u64) -> BBox {
        let k = (frame - self.first_frame) as f32;
        BBox {
            x: (self.x0 + self.vx * k).clamp(0.0, 1.0 - self.w),
            y: (self.y0 + self.vy * k).clamp(0.0, 1.0 - self.h),
            w: self.w,
            h: self.h,
        }
    }

    /// Box as emitted by the emulated tracker: the true box plus bounded jitter.
    pub fn observed_bbox(&self, frame: u64) -> BBox {
        let t = self.true_bbox(frame);
        let bits = rng::mix64(self.noise_seed ^ frame);
        let jx = ((bits & 0xffff) as f32 / 65535.0 * 2.0 - 1.0) * BBOX_JITTER;
        let jy = (((bits >> 16) & 0xffff) as f32 / 65535.0 * 2.0 - 1.0) * BBOX_JITTER;
        BBox {
            x: (t.x + jx).clamp(0.0, 1.0 - t.w),
            y: (t.y + jy).clamp(0.0, 1.0 - t.h),
            w: t.w,
            h: t.h,
        }
    }

    fn observe(&self, desc: &StreamDescriptor, frame: u64) -> (DetectionEvent, GroundTruthLabel) {
        let ts_ms = desc.frame_ts_ms(frame);
        let event = DetectionEvent {
            stream_id: desc.stream_id,
            ts_ms,
            tracking_id: self.tracking_id,
            class: self.class,
            bbox: self.observed_bbox(frame),
        };
        let truth = GroundTruthLabel {
            frame: FrameRef { stream_id: desc.stream_id, frame, ts_ms },
            tracking_id: self.tracking_id,
            class: self.class,
            bbox: self.true_bbox(frame),
        };
        (event, truth)
    }
}

/// Iterator over a stream's arrivals in time order, truncated to the trace.
pub struct Arrivals {
    rng: ChaCha8Rng,
    process: TrafficProcess,
    modulation: Vec<f64>,
    bound: f64,
    fps: f64,
    duration_s: f64,
    total_frames: u64,
    t: f64,
    next_local_id: u64,
    id_base: u64,
}

pub fn arrivals(desc: &StreamDescriptor, process: &TrafficProcess, duration_s: f64) -> Arrivals {
    let modulation = process.modulation_path(desc.trace_seed, duration_s);
    let mod_max = modulation.iter().copied().fold(0.0, f64::max);
    Arrivals {
        rng: rng::rng_for(desc.trace_seed, rng::label_salt("arrivals")),
        bound: process.deterministic_bound() * mod_max,
        process: process.clone(),
        modulation,
        fps: desc.fps as f64,
        duration_s,
        total_frames: (duration_s * desc.fps as f64).floor() as u64,
        t: 0.0,
        next_local_id: 1,
        id_base: (desc.stream_id.0 as u64) << STREAM_SHIFT,
    }
}

impl Arrivals {
    fn rate(&self, t: f64) -> f64 {
        let minute = ((t / 60.0) as usize).min(self.modulation.len() - 1);
        self.process.deterministic_rate(t) * self.modulation[minute]
    }
}

impl Iterator for Arrivals {
    type Item = Arrival;

    fn next(&mut self) -> Option<Arrival> {
        if self.bound <= 0.0 {
            return None;
        }
        loop {
            let u: f64 = self.rng.gen();
            self.t += -(1.0 - u).ln() / self.bound;
            if self.t >= self.duration_s {
                return None;
            }
            let accept: f64 = self.rng.gen();
            if accept * self.bound >= self.rate(self.t) {
                continue;
            }
            let class = VehicleClass(self.process.sample_class(&mut self.rng));
            let first_frame = (self.t * self.fps).ceil() as u64;
            if first_frame >= self.total_frames {
                return None;
            }
            let id = self.id_base | self.next_local_id;
            self.next_local_id += 1;
            return Some(Arrival { tracking_id: id, time_s: self.t, first_frame, class });
        }
    }
}

/// Unique vehicles first seen in each second, per class, computed from the
/// arrival process alone. Matches what aggregating the full trace produces.
pub fn first_seen_counts(
    desc: &StreamDescriptor,
    process: &TrafficProcess,
    duration_s: u64,
    n_classes: usize,
) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; n_classes]; duration_s as usize];
    for a in arrivals(desc, process, duration_s as f64) {
        let sec = (desc.frame_ts_ms(a.first_frame) / 1000) as usize;
        if sec < out.len() {
            out[sec][a.class.index()] += 1;
        }
    }
    out
}

/// Frame-ordered trace of a stream. Each item is the emitted event and its
/// ground-truth counterpart; events are ordered by (ts_ms, tracking_id).
pub struct StreamTrace {
    desc: StreamDescriptor,
    dwell: Dwell,
    arrivals: std::iter::Peekable<Arrivals>,
    active: Vec<Vehicle>,
    total_frames: u64,
    frame: u64,
    cursor: usize,
}

impl StreamTrace {
    pub fn new(desc: &StreamDescriptor, process: &TrafficProcess, duration_s: f64) -> Self {
        Self {
            desc: desc.clone(),
            dwell: process.dwell.clone(),
            arrivals: arrivals(desc, process, duration_s).peekable(),
            active: Vec::new(),
            total_frames: (duration_s * desc.fps as f64).floor() as u64,
            frame: 0,
            cursor: 0,
        }
    }

    pub fn descriptor(&self) -> &StreamDescriptor {
        &self.desc
    }

    /// Current frame index; advances as frames are exhausted.
    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn total_frames(&self) -> u64 {
        self.total_frames
    }

    fn admit(&mut self) {
        let frame = self.frame;
        self.active.retain(|v| v.last_frame() >= frame);
        while let Some(a) = self.arrivals.peek() {
            if a.first_frame > frame {
                break;
            }
            let a = self.arrivals.next().expect("peeked");
            self.active.push(Vehicle::from_arrival(&a, self.desc.trace_seed, &self.dwell));
        }
    }

    /// All observations of the next frame (possibly empty), or `None` at the end.
    pub fn next_frame(&mut self) -> Option<(u64, Vec<(DetectionEvent, GroundTruthLabel)>)> {
        if self.cursor > 0 {
            self.frame += 1;
            self.cursor = 0;
        }
        if self.frame >= self.total_frames {
            return None;
        }
        self.admit();
        let frame = self.frame;
        let out = self.active.iter().map(|v| v.observe(&self.desc, frame)).collect();
        self.cursor = usize::MAX;
        Some((frame, out))
    }
}

impl Iterator for StreamTrace {
    type Item = (DetectionEvent, GroundTruthLabel);

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.frame >= self.total_frames {
                return None;
            }
            if self.cursor == 0 {
                self.admit();
            }
            if self.cursor < self.active.len() {
                let v = self.active[self.cursor];
                self.cursor += 1;
                return Some(v.observe(&self.desc, self.frame));
            }
            self.frame += 1;
            self.cursor = 0;
        }
    }
}

/// Generates the full event sequence of one stream.
pub fn generate_stream(
    desc: &StreamDescriptor,
    process: &TrafficProcess,
    duration_s: f64,
) -> Vec<DetectionEvent> {
    StreamTrace::new(desc, process, duration_s).map(|(e, _)| e).collect()
}

/// Events with their ground-truth counterparts, index-aligned.
pub fn generate_trace(
    desc: &StreamDescriptor,
    process: &TrafficProcess,
    duration_s: f64,
) -> (Vec<DetectionEvent>, Vec<GroundTruthLabel>) {
    StreamTrace::new(desc, process, duration_s).unzip()
}

/// Ground-truth objects visible in each requested frame. `frames` must be
/// sorted ascending; the result is index-aligned with it.
pub fn frames_at(
    desc: &StreamDescriptor,
    process: &TrafficProcess,
    duration_s: f64,
    frames: &[u64],
) -> Vec<Vec<GroundTruthLabel>> {
    debug_assert!(frames.windows(2).all(|w| w[0] <= w[1]));
    let mut out = vec![Vec::new(); frames.len()];
    for a in arrivals(desc, process, duration_s) {
        let start = frames.partition_point(|&f| f < a.first_frame);
        if start == frames.len() {
            continue;
        }
        let v = Vehicle::from_arrival(&a, desc.trace_seed, &process.dwell);
        for (i, &f) in frames.iter().enumerate().skip(start) {
            if f > v.last_frame() {
                break;
            }
            out[i].push(v.observe(desc, f).1);
        }
    }
    out
}
