use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::FlError;
use crate::emulator::{FrameRef, GroundTruthLabel};
use crate::model::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfidenceDist {
    Constant { value: f64 },
    Beta { alpha: f64, beta: f64 },
}

impl ConfidenceDist {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let p = match *self {
            Self::Constant { value } => value,
            Self::Beta { alpha, beta } => Beta::new(alpha, beta).expect("validated").sample(rng),
        };
        p.clamp(1e-6, 1.0 - 1e-6)
    }

    fn validate(&self) -> Result<(), FlError> {
        match *self {
            Self::Constant { value } if value > 0.0 && value < 1.0 => Ok(()),
            Self::Beta { alpha, beta } if alpha > 0.0 && beta > 0.0 => Ok(()),
            _ => Err(FlError::Config(format!("bad confidence distribution {self:?}"))),
        }
    }
}

/// Per-image labeling latency, gamma distributed with the given mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyDist {
    pub mean_s: f64,
    #[serde(default = "default_shape")]
    pub shape: f64,
}

fn default_shape() -> f64 {
    4.0
}

impl LatencyDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Gamma::new(self.shape, self.mean_s / self.shape).expect("validated").sample(rng)
    }
}

/// Simulated open-vocabulary labeler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelOracle {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default = "default_confidence")]
    pub confidence: ConfidenceDist,
    /// Per-class overrides, by class index; missing entries use `confidence`.
    #[serde(default)]
    pub class_confidence: Vec<Option<ConfidenceDist>>,
}

fn default_tau() -> f64 {
    0.30
}

fn default_confidence() -> ConfidenceDist {
    ConfidenceDist::Beta { alpha: 5.0, beta: 2.0 }
}

impl Default for LabelOracle {
    fn default() -> Self {
        Self { tau: default_tau(), noise_rate: 0.0, confidence: default_confidence(), class_confidence: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub frame: FrameRef,
    pub tracking_id: u64,
    /// Class assigned by the labeler.
    pub class: u16,
    /// Class of the underlying object; drives the synthetic features.
    pub true_class: u16,
    pub bbox: BBox,
    pub confidence: f64,
}

impl LabelOracle {
    pub fn validate(&self) -> Result<(), FlError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(FlError::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(FlError::Config(format!("noise_rate must lie in [0, 1], got {}", self.noise_rate)));
        }
        self.confidence.validate()?;
        self.class_confidence.iter().flatten().try_for_each(ConfidenceDist::validate)
    }

    fn confidence_for(&self, class: u16) -> &ConfidenceDist {
        self.class_confidence.get(class as usize).and_then(Option::as_ref).unwrap_or(&self.confidence)
    }

    /// Labels every ground-truth object of one frame, dropping items below
    /// `tau`. Also returns the dropped count.
    pub fn pseudo_label<R: Rng + ?Sized>(
        &self,
        frame: FrameRef,
        objects: &[GroundTruthLabel],
        n_classes: usize,
        rng: &mut R,
    ) -> (Vec<LabeledItem>, usize) {
        let mut kept = Vec::with_capacity(objects.len());
        let mut dropped = 0;
        for o in objects {
            let truth = o.class.0;
            let class = if n_classes > 1 && rng.gen::<f64>() < self.noise_rate {
                ((truth as usize + rng.gen_range(1..n_classes)) % n_classes) as u16
            } else {
                truth
            };
            let confidence = self.confidence_for(class).sample(rng);
            if confidence >= self.tau {
                kept.push(LabeledItem { frame, tracking_id: o.tracking_id, class, true_class: truth, bbox: o.bbox, confidence });
            } else {
                dropped += 1;
            }
        }
        (kept, dropped)
    }
}
