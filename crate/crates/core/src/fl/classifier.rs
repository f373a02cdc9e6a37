//! Softmax-linear stand-in for the detector head, over synthetic features.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClientUpdate, LabeledItem, ModelWeights};
use crate::model::BBox;
use crate::rng;

pub const FEATURE_DIM: usize = 64;

/// Spread of the class prototypes relative to the unit per-item noise.
const PROTOTYPE_SCALE: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Seed of the synthetic feature space.
    #[serde(default)]
    pub feature_seed: u64,
}

fn default_epochs() -> usize {
    3
}
fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: default_epochs(), learning_rate: default_lr(), batch_size: default_batch(), feature_seed: 0 }
    }
}

/// Deterministic feature vector for an object of `class` with box `bbox`:
/// class prototype, box geometry in the first four dimensions, and unit
/// gaussian noise keyed by the object.
pub fn features(class: u16, bbox: &BBox, tracking_id: u64, seed: u64) -> [f64; FEATURE_DIM] {
    let mut proto_rng = rng::rng_for(seed, rng::derive_seed(rng::label_salt("prototype"), class as u64));
    let key = tracking_id ^ ((bbox.x.to_bits() as u64) << 32 | bbox.y.to_bits() as u64);
    let mut noise_rng = rng::rng_for(seed, rng::derive_seed(rng::label_salt("appearance"), key));
    let mut out = [0.0; FEATURE_DIM];
    for v in out.iter_mut() {
        let p: f64 = StandardNormal.sample(&mut proto_rng);
        let n: f64 = StandardNormal.sample(&mut noise_rng);
        *v = PROTOTYPE_SCALE * p + n;
    }
    for (v, g) in out.iter_mut().zip([bbox.x, bbox.y, bbox.w, bbox.h]) {
        *v += g as f64;
    }
    out
}

fn dim(n_classes: usize) -> usize {
    n_classes * (FEATURE_DIM + 1)
}

fn logits(w: &[f64], x: &[f64; FEATURE_DIM], n_classes: usize) -> Vec<f64> {
    (0..n_classes)
        .map(|c| {
            let row = &w[c * (FEATURE_DIM + 1)..(c + 1) * (FEATURE_DIM + 1)];
            row[..FEATURE_DIM].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[FEATURE_DIM]
        })
        .collect()
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// Mini-batch gradient descent on mean cross-entropy.
fn sgd(init: &ModelWeights, data: &[([f64; FEATURE_DIM], u16)], n_classes: usize, cfg: &TrainConfig, seed: u64) -> ModelWeights {
    let mut w = init.0.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng::rng_for(seed, rng::label_salt("local-train"));
    let mut grad = vec![0.0; w.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let (x, y) = &data[i];
                let mut p = logits(&w, x, n_classes);
                softmax(&mut p);
                p[*y as usize] -= 1.0;
                for (c, pc) in p.iter().enumerate() {
                    let row = &mut grad[c * (FEATURE_DIM + 1)..(c + 1) * (FEATURE_DIM + 1)];
                    for (g, xv) in row[..FEATURE_DIM].iter_mut().zip(x) {
                        *g += pc * xv;
                    }
                    row[FEATURE_DIM] += pc;
                }
            }
            let k = cfg.learning_rate / batch.len() as f64;
            for (wv, g) in w.iter_mut().zip(&grad) {
                *wv -= k * g;
            }
        }
    }
    ModelWeights(w)
}

fn dataset(items: &[LabeledItem], cfg: &TrainConfig) -> Vec<([f64; FEATURE_DIM], u16)> {
    items.iter().map(|i| (features(i.true_class, &i.bbox, i.tracking_id, cfg.feature_seed), i.class)).collect()
}

/// Fine-tunes `global` on one client's items. An empty dataset returns the
/// global weights with `n_samples = 0`, so the client drops out of FedAvg.
pub fn local_train(
    client_id: &str,
    global: &ModelWeights,
    items: &[LabeledItem],
    n_classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> ClientUpdate {
    assert_eq!(global.dim(), dim(n_classes), "weight dimension");
    if items.is_empty() {
        return ClientUpdate { client_id: client_id.into(), weights: global.clone(), n_samples: 0 };
    }
    let weights = sgd(global, &dataset(items, cfg), n_classes, cfg, seed);
    ClientUpdate { client_id: client_id.into(), weights, n_samples: items.len() as u64 }
}

/// Pooled training on all items at once, for comparison with federation.
pub fn train_centralized(init: &ModelWeights, items: &[LabeledItem], n_classes: usize, cfg: &TrainConfig, seed: u64) -> ModelWeights {
    sgd(init, &dataset(items, cfg), n_classes, cfg, seed)
}

/// Share of items whose argmax prediction equals the true class.
pub fn accuracy(w: &ModelWeights, items: &[LabeledItem], n_classes: usize, cfg: &TrainConfig) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let hits = items
        .iter()
        .filter(|i| {
            let z = logits(&w.0, &features(i.true_class, &i.bbox, i.tracking_id, cfg.feature_seed), n_classes);
            let best = (0..n_classes).fold(0, |b, c| if z[c] > z[b] { c } else { b });
            best == i.true_class as usize
        })
        .count();
    hits as f64 / items.len() as f64
}

pub(crate) fn weight_dim(n_classes: usize) -> usize {
    dim(n_classes)
}
