use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::weight_dim;
use super::{
    accuracy, fedavg, local_train, stratified_sample, ClientUpdate, FlError, LabelOracle, LabeledItem, LatencyDist,
    ModelWeights, SamplingConfig, TrainConfig,
};
use crate::emulator::{frames_at, Dwell, FrameRef, TrafficProcess};
use crate::model::{JunctionId, StreamDescriptor, StreamId, DEFAULT_CLASSES, DEFAULT_CLASS_MIX};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub id: String,
    /// Device class label, e.g. `jo32` or `jo64`; informational.
    #[serde(default)]
    pub tier: String,
    pub streams: u32,
    /// Overrides the base class mix to make the client non-IID.
    #[serde(default)]
    pub class_mix: Option<Vec<f64>>,
    pub latency: LatencyDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub classes: Vec<String>,
    #[serde(default = "default_process")]
    pub process: TrafficProcess,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub oracle: LabelOracle,
    #[serde(default)]
    pub training: TrainConfig,
    pub clients: Vec<ClientSpec>,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Train clients in parallel. Results do not depend on it.
    #[serde(default = "default_true")]
    pub concurrent: bool,
    #[serde(default = "default_holdout")]
    pub holdout_frames: usize,
    #[serde(default = "default_fps")]
    pub fps: u32,
}

fn default_classes() -> Vec<String> {
    DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}
fn default_process() -> TrafficProcess {
    TrafficProcess::constant(560.0, DEFAULT_CLASS_MIX.to_vec(), Dwell::Geometric { mean_frames: 12.0 })
}
fn default_rounds() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_holdout() -> usize {
    300
}
fn default_fps() -> u32 {
    25
}

impl FlConfig {
    pub fn validate(&self) -> Result<(), FlError> {
        let n = self.classes.len();
        self.process.validate(n).map_err(|e| FlError::Config(e.to_string()))?;
        self.oracle.validate()?;
        if self.clients.is_empty() {
            return Err(FlError::Config("no clients".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for c in &self.clients {
            if !ids.insert(&c.id) {
                return Err(FlError::Config(format!("duplicate client id {}", c.id)));
            }
            if c.latency.mean_s <= 0.0 || c.latency.shape <= 0.0 {
                return Err(FlError::Config(format!("client {}: latency must be positive", c.id)));
            }
            if let Some(mix) = &c.class_mix {
                let mut p = self.process.clone();
                p.class_mix = mix.clone();
                p.validate(n).map_err(|e| FlError::Config(format!("client {}: {e}", c.id)))?;
            }
        }
        if !(self.sampling.duration_s > 0.0 && self.sampling.effective_window_s() > 0.0) {
            return Err(FlError::Config("sampling duration and window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoundRecord {
    Client {
        round: usize,
        client_id: String,
        tier: String,
        streams: u32,
        frames: usize,
        items: usize,
        dropped_below_tau: usize,
        n_samples: u64,
        class_histogram: Vec<u64>,
        /// Simulated labeling time, summed over frames.
        label_latency_s: f64,
        mean_label_latency_s: f64,
        train_wall_ms: f64,
        skipped: bool,
    },
    Round {
        round: usize,
        participants: usize,
        total_samples: u64,
        accuracy: f64,
        wall_ms: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub records: Vec<RoundRecord>,
    pub accuracy: Vec<f64>,
    pub final_weights: Option<ModelWeights>,
}

struct ClientData {
    frames: usize,
    items: Vec<LabeledItem>,
    dropped: usize,
    latency_s: f64,
}

fn client_descriptor(client_idx: usize, stream: u32, seed: u64, round: usize, fps: u32) -> StreamDescriptor {
    let salt = rng::derive_seed(rng::derive_seed(client_idx as u64, stream as u64), round as u64);
    StreamDescriptor {
        stream_id: StreamId(client_idx as u32 * 1000 + stream),
        name: format!("c{client_idx}-s{stream}"),
        junction_id: JunctionId(0),
        fps,
        trace_seed: rng::derive_seed(seed, salt),
    }
}

fn collect_client(cfg: &FlConfig, idx: usize, round: usize) -> ClientData {
    let spec = &cfg.clients[idx];
    let mut process = cfg.process.clone();
    if let Some(mix) = &spec.class_mix {
        process.class_mix = mix.clone();
    }
    let mut label_rng = rng::rng_for(cfg.seed, rng::derive_seed(rng::label_salt("label"), (idx * 1_000_003 + round) as u64));
    let mut out = ClientData { frames: 0, items: Vec::new(), dropped: 0, latency_s: 0.0 };
    for s in 0..spec.streams {
        let desc = client_descriptor(idx, s, cfg.seed, round, cfg.fps);
        let picks = stratified_sample(&desc, &cfg.sampling, rng::derive_seed(cfg.seed, round as u64));
        let numbers: Vec<u64> = picks.iter().map(|f| f.frame).collect();
        let truth = frames_at(&desc, &process, cfg.sampling.duration_s, &numbers);
        for (f, objects) in picks.iter().zip(&truth) {
            let (items, dropped) = cfg.oracle.pseudo_label(*f, objects, cfg.classes.len(), &mut label_rng);
            out.latency_s += spec.latency.sample(&mut label_rng);
            out.items.extend(items);
            out.dropped += dropped;
        }
        out.frames += picks.len();
    }
    out
}

/// Noiselessly labeled objects from a separate stream, for global accuracy.
fn holdout(cfg: &FlConfig) -> Vec<LabeledItem> {
    let desc = StreamDescriptor {
        stream_id: StreamId(u32::MAX >> 8),
        name: "holdout".into(),
        junction_id: JunctionId(0),
        fps: cfg.fps,
        trace_seed: rng::derive_seed(cfg.seed, rng::label_salt("holdout")),
    };
    let duration = cfg.holdout_frames as f64 * 10.0;
    let frames: Vec<u64> = (0..cfg.holdout_frames as u64).map(|i| i * 10 * cfg.fps as u64 + 7).collect();
    let truth = frames_at(&desc, &cfg.process, duration, &frames);
    frames
        .iter()
        .zip(truth)
        .flat_map(|(&f, objs)| {
            let frame = FrameRef { stream_id: desc.stream_id, frame: f, ts_ms: desc.frame_ts_ms(f) };
            objs.into_iter().map(move |o| LabeledItem {
                frame,
                tracking_id: o.tracking_id,
                class: o.class.0,
                true_class: o.class.0,
                bbox: o.bbox,
                confidence: 1.0,
            })
        })
        .collect()
}

/// Runs `cfg.rounds` rounds of sample, label, train and aggregate. Each
/// record is also written to `log` as one JSON line.
pub fn run_rounds(cfg: &FlConfig, mut log: Option<&mut dyn Write>) -> Result<RoundLog, FlError> {
    cfg.validate()?;
    let n_classes = cfg.classes.len();
    let mut global = ModelWeights::zeros(weight_dim(n_classes));
    let test = holdout(cfg);
    let mut out = RoundLog::default();
    for round in 0..cfg.rounds {
        let started = Instant::now();
        let work = |idx: usize| {
            let data = collect_client(cfg, idx, round);
            let t = Instant::now();
            let seed = rng::derive_seed(cfg.seed, rng::derive_seed(round as u64, idx as u64));
            let update = local_train(&cfg.clients[idx].id, &global, &data.items, n_classes, &cfg.training, seed);
            (data, update, t.elapsed().as_secs_f64() * 1e3)
        };
        let results: Vec<(ClientData, ClientUpdate, f64)> = if cfg.concurrent {
            (0..cfg.clients.len()).into_par_iter().map(work).collect()
        } else {
            (0..cfg.clients.len()).map(work).collect()
        };

        let mut records = Vec::with_capacity(results.len() + 1);
        for (idx, (data, update, train_ms)) in results.iter().enumerate() {
            let spec = &cfg.clients[idx];
            let mut hist = vec![0u64; n_classes];
            for i in &data.items {
                hist[i.class as usize] += 1;
            }
            records.push(RoundRecord::Client {
                round,
                client_id: spec.id.clone(),
                tier: spec.tier.clone(),
                streams: spec.streams,
                frames: data.frames,
                items: data.items.len(),
                dropped_below_tau: data.dropped,
                n_samples: update.n_samples,
                class_histogram: hist,
                label_latency_s: data.latency_s,
                mean_label_latency_s: if data.frames == 0 { 0.0 } else { data.latency_s / data.frames as f64 },
                train_wall_ms: *train_ms,
                skipped: update.n_samples == 0,
            });
        }
        let updates: Vec<ClientUpdate> = results.into_iter().map(|(_, u, _)| u).collect();
        match fedavg(&updates) {
            Ok(w) => global = w,
            Err(FlError::AllClientsEmpty) => {}
            Err(e) => return Err(e),
        }
        let acc = accuracy(&global, &test, n_classes, &cfg.training);
        records.push(RoundRecord::Round {
            round,
            participants: updates.iter().filter(|u| u.n_samples > 0).count(),
            total_samples: updates.iter().map(|u| u.n_samples).sum(),
            accuracy: acc,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(w) = log.as_deref_mut() {
            for r in &records {
                serde_json::to_writer(&mut *w, r).map_err(|e| FlError::Config(e.to_string()))?;
                w.write_all(b"\n").map_err(|e| FlError::Config(e.to_string()))?;
            }
        }
        out.records.extend(records);
        out.accuracy.push(acc);
    }
    out.final_weights = Some(global);
    Ok(out)
}
