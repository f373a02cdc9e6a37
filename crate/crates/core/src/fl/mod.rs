//! Continuous federated fine-tuning, simulated: stratified frame sampling,
//! thresholded pseudo-labels, local training of a linear stand-in classifier
//! on each client, and FedAvg.

mod classifier;
mod oracle;
mod rounds;
mod sampling;

use serde::{Deserialize, Serialize};

pub use classifier::{accuracy, features, local_train, train_centralized, TrainConfig, FEATURE_DIM};
pub use oracle::{ConfidenceDist, LabelOracle, LabeledItem, LatencyDist};
pub use rounds::{run_rounds, ClientSpec, FlConfig, RoundLog, RoundRecord};
pub use sampling::{stratified_sample, SamplingConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FlError {
    #[error("weight vectors differ in dimension: {expected} vs {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no client contributed samples")]
    AllClientsEmpty,
    #[error("client {0} has an empty dataset")]
    EmptyDataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Flat parameter vector of the stand-in classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights(pub Vec<f64>);

impl ModelWeights {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|w| w.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: String,
    pub weights: ModelWeights,
    pub n_samples: u64,
}

/// `Σ_k (n_k / N) · w_k`, elementwise. Clients with no samples carry no weight.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ModelWeights, FlError> {
    let live: Vec<&ClientUpdate> = updates.iter().filter(|u| u.n_samples > 0).collect();
    let Some(first) = live.first() else {
        return Err(FlError::AllClientsEmpty);
    };
    let dim = first.weights.dim();
    if let Some(bad) = updates.iter().find(|u| u.weights.dim() != dim) {
        return Err(FlError::DimensionMismatch { expected: dim, got: bad.weights.dim() });
    }
    let total: u64 = live.iter().map(|u| u.n_samples).sum();
    let mut out = vec![0.0; dim];
    for u in live {
        let share = u.n_samples as f64 / total as f64;
        for (o, w) in out.iter_mut().zip(&u.weights.0) {
            *o += share * w;
        }
    }
    Ok(ModelWeights(out))
}
