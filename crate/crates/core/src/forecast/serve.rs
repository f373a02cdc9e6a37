//! Periodic forecast issuing. One task computes a forecast per tick and fans
//! it out; a tick whose computation overruns the period is counted and the
//! missed ticks are skipped, never queued.

use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use tokio::sync::{broadcast, watch};
use tokio::time::MissedTickBehavior;

use super::{Forecast, ForecastError, ForecastModel};

/// Supplies the lag window for a tick: `(issued_at_s, [junction × lag])`.
pub trait LagSource: Send + Sync + 'static {
    fn window(&self, lag: usize) -> Result<(u64, Array2<f64>), ForecastError>;
}

impl<F> LagSource for F
where
    F: Fn(usize) -> Result<(u64, Array2<f64>), ForecastError> + Send + Sync + 'static,
{
    fn window(&self, lag: usize) -> Result<(u64, Array2<f64>), ForecastError> {
        self(lag)
    }
}

#[derive(Debug, Default)]
struct Counters {
    ticks: AtomicU64,
    overruns: AtomicU64,
    cache_hits: AtomicU64,
    errors: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ServeReport {
    pub ticks: u64,
    pub overruns: u64,
    pub cache_hits: u64,
    pub errors: u64,
    pub max_latency_ms: f64,
    pub mean_latency_ms: f64,
}

pub struct ForecastService {
    model: Arc<dyn ForecastModel>,
    junctions: Vec<String>,
    lag: usize,
    horizon: usize,
    period: Duration,
    tx: broadcast::Sender<Arc<Forecast>>,
    latest: RwLock<Option<Arc<Forecast>>>,
    cache: Mutex<Option<(u64, Arc<Array2<f64>>)>>,
    latencies_ms: Mutex<Vec<f64>>,
    counters: Counters,
}

fn window_hash(w: &Array2<f64>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    w.shape().hash(&mut h);
    for v in w.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

impl ForecastService {
    pub fn new(
        model: Arc<dyn ForecastModel>,
        junctions: Vec<String>,
        lag: usize,
        horizon: usize,
        period: Duration,
    ) -> Arc<Self> {
        let (tx, _) = broadcast::channel(16);
        Arc::new(Self {
            model,
            junctions,
            lag,
            horizon,
            period,
            tx,
            latest: RwLock::new(None),
            cache: Mutex::new(None),
            latencies_ms: Mutex::new(Vec::new()),
            counters: Counters::default(),
        })
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<Forecast>> {
        self.tx.subscribe()
    }

    pub fn latest(&self) -> Option<Arc<Forecast>> {
        self.latest.read().clone()
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    pub fn report(&self) -> ServeReport {
        let lat = self.latencies_ms.lock();
        ServeReport {
            ticks: self.counters.ticks.load(Ordering::Relaxed),
            overruns: self.counters.overruns.load(Ordering::Relaxed),
            cache_hits: self.counters.cache_hits.load(Ordering::Relaxed),
            errors: self.counters.errors.load(Ordering::Relaxed),
            max_latency_ms: lat.iter().copied().fold(0.0, f64::max),
            mean_latency_ms: if lat.is_empty() { 0.0 } else { lat.iter().sum::<f64>() / lat.len() as f64 },
        }
    }

    /// Computes and publishes one forecast.
    pub async fn tick(self: &Arc<Self>, source: &Arc<dyn LagSource>) -> Result<Arc<Forecast>, ForecastError> {
        let started = Instant::now();
        let this = self.clone();
        let src = source.clone();
        let (issued_at_s, predictions) = tokio::task::spawn_blocking(move || -> Result<_, ForecastError> {
            let (issued_at_s, window) = src.window(this.lag)?;
            let key = window_hash(&window);
            let cached = this.cache.lock().as_ref().filter(|(k, _)| *k == key).map(|(_, p)| p.clone());
            let preds = match cached {
                Some(p) => {
                    this.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                    p
                }
                None => {
                    let p = Arc::new(this.model.predict(window.view(), this.horizon)?);
                    *this.cache.lock() = Some((key, p.clone()));
                    p
                }
            };
            Ok((issued_at_s, preds))
        })
        .await
        .expect("forecast task panicked")?;

        let forecast = Arc::new(Forecast {
            issued_at_s,
            model_id: self.model.model_id().to_string(),
            step_minutes: 1,
            horizon_steps: self.horizon,
            junctions: self.junctions.clone(),
            predictions: predictions.rows().into_iter().map(|r| r.to_vec()).collect(),
        });
        let elapsed = started.elapsed();
        self.latencies_ms.lock().push(elapsed.as_secs_f64() * 1e3);
        self.counters.ticks.fetch_add(1, Ordering::Relaxed);
        if elapsed > self.period {
            self.counters.overruns.fetch_add(1, Ordering::Relaxed);
            tracing::warn!(?elapsed, period = ?self.period, "forecast overran its period");
        }
        *self.latest.write() = Some(forecast.clone());
        let _ = self.tx.send(forecast.clone());
        Ok(forecast)
    }

    /// Ticks every period until `shutdown` turns true.
    pub async fn run(self: Arc<Self>, source: Arc<dyn LagSource>, mut shutdown: watch::Receiver<bool>) -> ServeReport {
        let mut interval = tokio::time::interval(self.period);
        interval.set_missed_tick_behavior(MissedTickBehavior::Skip);
        while !*shutdown.borrow() {
            tokio::select! {
                biased;
                changed = shutdown.changed() => {
                    if changed.is_err() {
                        break;
                    }
                }
                _ = interval.tick() => {
                    if let Err(e) = self.tick(&source).await {
                        self.counters.errors.fetch_add(1, Ordering::Relaxed);
                        match e {
                            // expected until enough minutes are ingested
                            ForecastError::TooShort { .. } => tracing::debug!(error = %e, "forecast tick skipped"),
                            _ => tracing::warn!(error = %e, "forecast tick failed"),
                        }
                    }
                }
            }
        }
        self.report()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::HistoricalAverage;

    struct Slow(Duration);

    impl ForecastModel for Slow {
        fn model_id(&self) -> &str {
            "slow"
        }
        fn fit(&mut self, _: &super::super::MinuteSeries, _: usize, _: usize) -> Result<Vec<f64>, ForecastError> {
            Ok(vec![])
        }
        fn predict(&self, lag: ndarray::ArrayView2<f64>, h: usize) -> Result<Array2<f64>, ForecastError> {
            std::thread::sleep(self.0);
            Ok(Array2::zeros((lag.nrows(), h)))
        }
    }

    fn constant_source() -> Arc<dyn LagSource> {
        Arc::new(|lag: usize| Ok((0u64, Array2::from_elem((3, lag), 4.0))))
    }

    #[tokio::test]
    async fn fans_out_and_caches_identical_windows() {
        let names = vec!["a".into(), "b".into(), "c".into()];
        let svc = ForecastService::new(Arc::new(HistoricalAverage), names, 5, 5, Duration::from_millis(50));
        let mut subs: Vec<_> = (0..3).map(|_| svc.subscribe()).collect();
        let (stop_tx, stop_rx) = watch::channel(false);
        let task = tokio::spawn(svc.clone().run(constant_source(), stop_rx));
        for s in &mut subs {
            let f = s.recv().await.unwrap();
            assert_eq!(f.predictions, vec![vec![4.0; 5]; 3]);
        }
        tokio::time::sleep(Duration::from_millis(200)).await;
        stop_tx.send(true).unwrap();
        let report = task.await.unwrap();
        assert!(report.ticks >= 3);
        assert_eq!(report.cache_hits, report.ticks - 1);
        assert_eq!(report.overruns, 0);
        assert!(svc.latest().is_some());
    }

    #[tokio::test]
    async fn overruns_are_counted_and_ticks_skipped() {
        let svc = ForecastService::new(
            Arc::new(Slow(Duration::from_millis(120))),
            vec!["a".into(), "b".into(), "c".into()],
            5,
            5,
            Duration::from_millis(50),
        );
        let src: Arc<dyn LagSource> = Arc::new({
            let n = AtomicU64::new(0);
            move |lag: usize| {
                let k = n.fetch_add(1, Ordering::Relaxed);
                Ok((k, Array2::from_elem((3, lag), k as f64)))
            }
        });
        let (stop_tx, stop_rx) = watch::channel(false);
        let task = tokio::spawn(svc.clone().run(src, stop_rx));
        tokio::time::sleep(Duration::from_millis(650)).await;
        stop_tx.send(true).unwrap();
        let report = task.await.unwrap();
        assert!(report.overruns >= 1);
        assert_eq!(report.overruns, report.ticks);
        // skipped rather than queued: far fewer ticks than 650 / 50
        assert!(report.ticks <= 7, "{report:?}");
    }
}
