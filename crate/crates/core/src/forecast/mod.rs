//! Short-horizon junction-count forecasting over the coarse graph.

mod gru;
pub mod serve;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use gru::{GraphGru, GruConfig};

use crate::model::CameraId;
use crate::store::{FlowMatrix, StoreError, TimeSeriesStore};

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid forecast request: {0}")]
    InvalidRequest(String),
    #[error("series of {minutes} minutes is shorter than lag + horizon = {needed}")]
    TooShort { minutes: usize, needed: usize },
    #[error("training diverged at epoch {epoch} (seed {seed}); config: {config}")]
    DivergenceDetected { seed: u64, epoch: usize, config: String },
    #[error("model is not fitted")]
    NotFitted,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn shape_err(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> ForecastError {
    ForecastError::ShapeMismatch { expected: format!("{expected:?}"), got: format!("{got:?}") }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastRequest {
    #[serde(default = "five")]
    pub lag_minutes: u32,
    #[serde(default = "five")]
    pub horizon_minutes: u32,
    #[serde(default = "one")]
    pub step_minutes: u32,
    /// Empty means every junction.
    #[serde(default)]
    pub cameras: Vec<String>,
}

fn five() -> u32 {
    5
}

fn one() -> u32 {
    1
}

impl Default for ForecastRequest {
    fn default() -> Self {
        Self { lag_minutes: 5, horizon_minutes: 5, step_minutes: 1, cameras: Vec::new() }
    }
}

impl ForecastRequest {
    pub fn validate(&self) -> Result<(), ForecastError> {
        if self.lag_minutes == 0 || self.horizon_minutes == 0 || self.step_minutes == 0 {
            return Err(ForecastError::InvalidRequest("lag, horizon and step must be positive".into()));
        }
        if self.horizon_minutes % self.step_minutes != 0 {
            return Err(ForecastError::InvalidRequest(format!(
                "horizon {} is not a multiple of step {}",
                self.horizon_minutes, self.step_minutes
            )));
        }
        Ok(())
    }

    pub fn horizon_steps(&self) -> usize {
        (self.horizon_minutes / self.step_minutes) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub issued_at_s: u64,
    pub model_id: String,
    pub step_minutes: u32,
    pub horizon_steps: usize,
    pub junctions: Vec<String>,
    /// `[junction][step]`, predicted vehicles per minute.
    pub predictions: Vec<Vec<f64>>,
}

impl Forecast {
    /// Keeps only the named junctions, in request order. Unknown names are
    /// reported back.
    pub fn select(&self, names: &[String]) -> Result<Forecast, String> {
        if names.is_empty() {
            return Ok(self.clone());
        }
        let mut out = Forecast { junctions: Vec::new(), predictions: Vec::new(), ..self.clone() };
        for n in names {
            let i = self.junctions.iter().position(|j| j == n).ok_or_else(|| n.clone())?;
            out.junctions.push(n.clone());
            out.predictions.push(self.predictions[i].clone());
        }
        Ok(out)
    }

    /// Aggregates per-minute steps into `step_minutes`-wide steps.
    pub fn regroup(&self, step_minutes: u32) -> Forecast {
        let k = (step_minutes / self.step_minutes).max(1) as usize;
        let predictions: Vec<Vec<f64>> =
            self.predictions.iter().map(|row| row.chunks(k).map(|c| c.iter().sum()).collect()).collect();
        Forecast {
            step_minutes: self.step_minutes * k as u32,
            horizon_steps: predictions.first().map_or(0, Vec::len),
            predictions,
            ..self.clone()
        }
    }
}

/// Per-minute totals `[junction × minute]` with a mask of fully missing minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct MinuteSeries {
    pub values: Array2<f64>,
    pub missing: Array2<bool>,
}

impl MinuteSeries {
    pub fn new(values: Array2<f64>) -> Self {
        let missing = Array2::from_elem(values.raw_dim(), false);
        Self { values, missing }
    }

    pub fn junctions(&self) -> usize {
        self.values.nrows()
    }

    pub fn minutes(&self) -> usize {
        self.values.ncols()
    }

    /// Sums per-second totals into minutes. `seconds[j]` is junction `j`'s
    /// totals starting at a minute boundary; a trailing partial minute is dropped.
    pub fn from_second_totals(seconds: &[Vec<u64>], missing: Option<&[Vec<bool>]>) -> Self {
        let minutes = seconds.first().map_or(0, |s| s.len() / 60);
        let mut values = Array2::zeros((seconds.len(), minutes));
        let mut mask = Array2::from_elem((seconds.len(), minutes), false);
        for (j, row) in seconds.iter().enumerate() {
            for m in 0..minutes {
                values[[j, m]] = row[m * 60..(m + 1) * 60].iter().sum::<u64>() as f64;
                if let Some(miss) = missing {
                    mask[[j, m]] = miss[j][m * 60..(m + 1) * 60].iter().all(|&x| x);
                }
            }
        }
        Self { values, missing: mask }
    }

    pub fn from_flow_matrix(m: &FlowMatrix) -> Self {
        Self::from_second_totals(&m.totals(), Some(&m.missing))
    }

    pub fn slice_minutes(&self, from: usize, to: usize) -> MinuteSeries {
        MinuteSeries {
            values: self.values.slice(s![.., from..to]).to_owned(),
            missing: self.missing.slice(s![.., from..to]).to_owned(),
        }
    }

    /// Mean over observed cells; zero for an empty series.
    pub fn observed_mean(&self) -> f64 {
        let (sum, n) = self
            .values
            .iter()
            .zip(&self.missing)
            .filter(|(_, m)| !**m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Minute series for `cameras` (one row each, in order) over
/// `[from_s, from_s + 60 * minutes)`. Missing seconds read as zero.
pub fn build_minute_series(
    store: &TimeSeriesStore,
    cameras: &[CameraId],
    from_s: u64,
    minutes: usize,
) -> Result<MinuteSeries, ForecastError> {
    let m = store.query(cameras, from_s, from_s + 60 * minutes as u64)?;
    Ok(MinuteSeries::from_flow_matrix(&m))
}

/// Common contract of the forecasting models.
pub trait ForecastModel: Send + Sync {
    fn model_id(&self) -> &str;

    /// Fits on `train` and returns the per-epoch training RMSE (empty for
    /// models without training).
    fn fit(&mut self, train: &MinuteSeries, lag: usize, horizon: usize) -> Result<Vec<f64>, ForecastError>;

    /// `lag` is `[junction × lag_minutes]`; returns `[junction × horizon_steps]`,
    /// clamped at zero.
    fn predict(&self, lag: ArrayView2<f64>, horizon_steps: usize) -> Result<Array2<f64>, ForecastError>;
}

/// Mean of the lag window, repeated over the horizon.
#[derive(Debug, Clone, Default)]
pub struct HistoricalAverage;

impl ForecastModel for HistoricalAverage {
    fn model_id(&self) -> &str {
        "historical_average"
    }

    fn fit(&mut self, _train: &MinuteSeries, _lag: usize, _horizon: usize) -> Result<Vec<f64>, ForecastError> {
        Ok(Vec::new())
    }

    fn predict(&self, lag: ArrayView2<f64>, horizon_steps: usize) -> Result<Array2<f64>, ForecastError> {
        if lag.ncols() == 0 {
            return Err(shape_err("at least one lag minute", lag.shape()));
        }
        let mut out = Array2::zeros((lag.nrows(), horizon_steps));
        for (j, row) in lag.rows().into_iter().enumerate() {
            let mean = row.sum() / row.len() as f64;
            out.row_mut(j).fill(mean.max(0.0));
        }
        Ok(out)
    }
}

/// Value one period back. `period = None` uses the lag length.
#[derive(Debug, Clone, Default)]
pub struct SeasonalNaive {
    pub period: Option<usize>,
}

impl ForecastModel for SeasonalNaive {
    fn model_id(&self) -> &str {
        "seasonal_naive"
    }

    fn fit(&mut self, _train: &MinuteSeries, _lag: usize, _horizon: usize) -> Result<Vec<f64>, ForecastError> {
        Ok(Vec::new())
    }

    fn predict(&self, lag: ArrayView2<f64>, horizon_steps: usize) -> Result<Array2<f64>, ForecastError> {
        let l = lag.ncols();
        let period = self.period.unwrap_or(l);
        if period == 0 || period > l {
            return Err(shape_err(format!("lag of at least {period} minutes"), lag.shape()));
        }
        let mut out = Array2::zeros((lag.nrows(), horizon_steps));
        for h in 1..=horizon_steps {
            // latest observed index congruent to (l - 1 + h) modulo the period
            let back = h.div_ceil(period) * period;
            let idx = l - 1 + h - back;
            for j in 0..lag.nrows() {
                out[[j, h - 1]] = lag[[j, idx]].max(0.0);
            }
        }
        Ok(out)
    }
}

/// Rolling-origin RMSE per horizon step. Every origin `t` with
/// `lag <= t <= T - horizon` predicts minutes `t..t+horizon` from
/// `t-lag..t`; masked targets are skipped.
pub fn evaluate(
    model: &dyn ForecastModel,
    test: &MinuteSeries,
    lag: usize,
    horizon: usize,
) -> Result<Vec<f64>, ForecastError> {
    let t_len = test.minutes();
    if t_len < lag + horizon {
        return Err(ForecastError::TooShort { minutes: t_len, needed: lag + horizon });
    }
    let mut sq = vec![0.0; horizon];
    let mut n = vec![0usize; horizon];
    for t in lag..=t_len - horizon {
        let pred = model.predict(test.values.slice(s![.., t - lag..t]), horizon)?;
        for h in 0..horizon {
            for j in 0..test.junctions() {
                if test.missing[[j, t + h]] {
                    continue;
                }
                let e = pred[[j, h]] - test.values[[j, t + h]];
                sq[h] += e * e;
                n[h] += 1;
            }
        }
    }
    Ok(sq.iter().zip(&n).map(|(s, &n)| if n == 0 { f64::NAN } else { (s / n as f64).sqrt() }).collect())
}

/// Centered moving average with a shrinking window at the ends.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;

    #[test]
    fn minute_summation_and_mask() {
        let secs = vec![vec![2u64; 180], vec![0u64; 180]];
        let mut miss = vec![vec![false; 180], vec![false; 180]];
        miss[1][60..120].iter_mut().for_each(|m| *m = true);
        let s = MinuteSeries::from_second_totals(&secs, Some(&miss));
        assert_eq!(s.values.row(0).to_vec(), vec![120.0; 3]);
        assert_eq!(s.missing.row(1).to_vec(), vec![false, true, false]);
        assert_eq!(s.values[[1, 1]], 0.0);
    }

    #[test]
    fn request_validation() {
        assert!(ForecastRequest::default().validate().is_ok());
        assert_eq!(ForecastRequest::default().horizon_steps(), 5);
        let bad = ForecastRequest { horizon_minutes: 5, step_minutes: 2, ..Default::default() };
        assert!(bad.validate().is_err());
        let zero = ForecastRequest { lag_minutes: 0, ..Default::default() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn baselines() {
        let lag = Array2::from_elem((3, 5), 7.0);
        let p = HistoricalAverage.predict(lag.view(), 5).unwrap();
        assert!(p.iter().all(|&v| v == 7.0));

        let lag = Array::from_shape_vec((1, 5), vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let p = SeasonalNaive::default().predict(lag.view(), 7).unwrap();
        assert_eq!(p.row(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 1.0, 2.0]);
        let p = SeasonalNaive { period: Some(2) }.predict(lag.view(), 3).unwrap();
        assert_eq!(p.row(0).to_vec(), vec![4.0, 5.0, 4.0]);

        let zeros = Array2::zeros((4, 5));
        for m in [&HistoricalAverage as &dyn ForecastModel, &SeasonalNaive::default()] {
            assert!(m.predict(zeros.view(), 5).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn regroup_and_select() {
        let f = Forecast {
            issued_at_s: 0,
            model_id: "m".into(),
            step_minutes: 1,
            horizon_steps: 4,
            junctions: vec!["a".into(), "b".into()],
            predictions: vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4]],
        };
        let g = f.regroup(2);
        assert_eq!(g.predictions[0], vec![3.0, 7.0]);
        assert_eq!(g.horizon_steps, 2);
        assert_eq!(f.select(&["b".into()]).unwrap().predictions, vec![vec![0.0; 4]]);
        assert_eq!(f.select(&["zz".into()]).unwrap_err(), "zz");
    }

    /// Direct restatement of the rolling-origin definition.
    fn brute_force_rmse(model: &dyn ForecastModel, data: &[Vec<f64>], lag: usize, horizon: usize) -> Vec<f64> {
        let t_len = data[0].len();
        let mut out = Vec::new();
        for h in 0..horizon {
            let mut errs = Vec::new();
            for origin in lag..=t_len - horizon {
                let window: Vec<f64> =
                    data.iter().flat_map(|row| row[origin - lag..origin].iter().copied()).collect();
                let w = Array2::from_shape_vec((data.len(), lag), window).unwrap();
                let p = model.predict(w.view(), horizon).unwrap();
                for (j, row) in data.iter().enumerate() {
                    errs.push((p[[j, h]] - row[origin + h]).powi(2));
                }
            }
            out.push((errs.iter().sum::<f64>() / errs.len() as f64).sqrt());
        }
        out
    }

    proptest! {
        #[test]
        fn rolling_rmse_matches_brute_force(
            data in (1usize..5, 8usize..20).prop_flat_map(|(n, t)| proptest::collection::vec(proptest::collection::vec(0.0f64..100.0, t), n)),
            lag in 1usize..4,
            horizon in 1usize..4,
        ) {
            let n = data.len();
            let t = data[0].len();
            let series = MinuteSeries::new(Array2::from_shape_vec((n, t), data.concat()).unwrap());
            for m in [&HistoricalAverage as &dyn ForecastModel, &SeasonalNaive::default()] {
                let got = evaluate(m, &series, lag, horizon).unwrap();
                let want = brute_force_rmse(m, &data, lag, horizon);
                for (g, w) in got.iter().zip(&want) {
                    prop_assert!((g - w).abs() <= 1e-9 * w.max(1.0));
                }
            }
        }

        #[test]
        fn historical_average_is_permutation_equivariant(
            data in proptest::collection::vec(proptest::collection::vec(0.0f64..100.0, 5), 2..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let n = data.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut crate::rng::rng_for(seed, 0));
            let x = Array2::from_shape_vec((n, 5), data.concat()).unwrap();
            let xp = Array2::from_shape_fn((n, 5), |(i, k)| x[[perm[i], k]]);
            let p = HistoricalAverage.predict(x.view(), 3).unwrap();
            let pp = HistoricalAverage.predict(xp.view(), 3).unwrap();
            for i in 0..n {
                prop_assert_eq!(pp.row(i), p.row(perm[i]));
            }
        }
    }
}
