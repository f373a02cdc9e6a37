//! Whole-scenario runs that leave CSV/JSON artifacts behind.
//!
//! Fast mode replays every stream as quickly as the CPU allows, in parallel,
//! through the same aggregator and store used live. Realtime mode starts a
//! gateway, paces all streams at their frame rate, and optionally serves the
//! API while it runs. Both end with the same analysis over the store.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::pipeline::{self, EdgeFlowRow};
use super::{Gateway, GatewayOptions, MetricsSample};
use crate::emulator::serve::Pacing;
use crate::emulator::{first_seen_counts, StreamTrace};
use crate::fl::{run_rounds, RoundRecord};
use crate::forecast::{evaluate, smooth, Forecast, ForecastModel, HistoricalAverage, MinuteSeries, SeasonalNaive};
use crate::graph::{CongestionState, Thresholds};
use crate::model::StreamId;
use crate::scenario::{ModelKind, Scenario};
use crate::scheduler::{metrics, sweep, write_sweep_csv, Placement, PlacementPolicy, SchedulerMetrics};
use crate::store::{StoreConfig, TimeSeriesStore};
use crate::worker::aggregate;

/// Vehicles per second the aggregate flow is compared against.
pub const PEAK_BOUND: u64 = 1000;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: Pacing,
    pub out_dir: PathBuf,
    pub skip_fl: bool,
    pub skip_forecast: bool,
    /// Shortens the trace; defaults to the scenario duration.
    pub duration_s: Option<u64>,
    /// Realtime mode: serve the API here while the run is in progress.
    pub api_addr: Option<SocketAddr>,
    /// Overrides the scenario's forecasting model.
    pub model: Option<ModelKind>,
}

impl RunOptions {
    pub fn new(mode: Pacing, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            out_dir: out_dir.into(),
            skip_fl: false,
            skip_forecast: false,
            duration_s: None,
            api_addr: None,
            model: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{module}: {message}")]
pub struct RunError {
    pub module: &'static str,
    pub message: String,
}

fn fail(module: &'static str) -> impl Fn(&dyn std::fmt::Display) -> RunError {
    move |e| RunError { module, message: e.to_string() }
}

macro_rules! attempt {
    ($module:literal, $e:expr) => {
        $e.map_err(|e| RunError { module: $module, message: e.to_string() })?
    };
}

#[derive(Debug, Clone, Serialize)]
pub struct SchedulerSummary {
    pub policy: PlacementPolicy,
    pub accepted: usize,
    pub rejected: usize,
    pub sweep_rows: usize,
    pub final_metrics: SchedulerMetrics,
    /// 1-based arrival index of the first stream on a device of the largest capacity.
    pub first_large_device_at: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub records: u64,
    pub expected_records: u64,
    pub summaries: u64,
    pub events: u64,
    pub late_events: u64,
    /// Per-class sums of the per-second counts equal the distinct tracking ids
    /// of the emitted events, for every stream. `None` when not checked.
    pub count_conservation: Option<bool>,
    /// Per-class store totals equal the arrival-process oracle for every stream.
    pub store_matches_trace: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowSummaryStats {
    pub peak_per_s: u64,
    pub peak_ts_s: u64,
    pub mean_per_s: f64,
    pub fraction_above_bound: f64,
    pub bound: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphSummary {
    pub road_vertices: usize,
    pub coarse_vertices: usize,
    pub super_edges: usize,
    pub thresholds: Thresholds,
    pub max_relative_mass_error: f64,
    pub state_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastSummary {
    pub model: String,
    pub lag_minutes: u32,
    pub horizon_minutes: u32,
    pub train_minutes: u32,
    pub test_minutes: u32,
    /// Model id → RMSE per horizon minute.
    pub rmse: BTreeMap<String, Vec<f64>>,
    pub rmse_smoothed: BTreeMap<String, Vec<f64>>,
    pub final_train_rmse: Option<f64>,
    /// Smoothed RMSE at the last horizon exceeds the first.
    pub degrades_with_horizon: bool,
    pub train_wall_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlSummary {
    pub rounds: usize,
    pub accuracy: Vec<f64>,
    /// Frames sampled per client in the first round.
    pub frames_per_client: BTreeMap<String, usize>,
    pub items_per_client: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub mode: Pacing,
    pub duration_s: u64,
    pub streams: usize,
    pub scheduler: SchedulerSummary,
    pub ingest: IngestSummary,
    pub flow: FlowSummaryStats,
    pub graph: GraphSummary,
    pub forecast: Option<ForecastSummary>,
    pub fl: Option<FlSummary>,
    pub artifacts: Vec<String>,
    pub wall_s: f64,
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>, RunError> {
        self.written.push(name.to_string());
        File::create(self.dir.join(name)).map(BufWriter::new).map_err(|e| fail("artifacts")(&e))
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), RunError> {
        let mut w = csv::Writer::from_writer(self.create(name)?);
        for r in rows {
            attempt!("artifacts", w.serialize(r));
        }
        attempt!("artifacts", w.flush());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<(), RunError> {
        let mut w = self.create(name)?;
        attempt!("artifacts", serde_json::to_writer_pretty(&mut w, v));
        attempt!("artifacts", w.write_all(b"\n"));
        attempt!("artifacts", w.flush());
        Ok(())
    }
}

/// Flat CSV form of a [`MetricsSample`].
#[derive(Serialize)]
pub struct MetricsRow {
    pub tick: u64,
    pub t_ms: u64,
    pub n_streams: usize,
    pub cumulative_fps: u64,
    pub active_devices: usize,
    pub active_capacity_tops: f64,
    pub utilization_pct: f64,
    pub max_device_utilization_pct: f64,
    pub total_power_w: f64,
    pub ingest_records: u64,
    pub ingest_records_per_s: f64,
    pub forecast_latency_ms: f64,
}

impl From<&MetricsSample> for MetricsRow {
    fn from(s: &MetricsSample) -> Self {
        let m = &s.metrics;
        Self {
            tick: s.tick,
            t_ms: s.t_ms,
            n_streams: s.n_streams,
            cumulative_fps: m.cumulative_fps,
            active_devices: m.active_devices,
            active_capacity_tops: m.active_capacity_tops,
            utilization_pct: m.utilization_pct,
            max_device_utilization_pct: m.max_device_utilization_pct,
            total_power_w: m.total_power_w,
            ingest_records: s.ingest_records,
            ingest_records_per_s: s.ingest_records_per_s,
            forecast_latency_ms: s.forecast_latency_ms,
        }
    }
}

#[derive(Serialize)]
struct PlacementCsv<'a> {
    arrival: usize,
    stream: &'a str,
    fps: u32,
    device: String,
    status: &'static str,
}

/// Places the scenario's streams in file order; returns the summary and
/// per-arrival metrics.
fn schedule(sc: &Scenario, art: &mut Artifacts) -> Result<(SchedulerSummary, Vec<MetricsSample>), RunError> {
    let fleet = &sc.fleet;
    let policy = sc.config.scheduler.policy;
    let fps = sc.streams.first().map_or(25, |d| d.fps);
    let fit: usize = fleet.devices().iter().map(|d| (d.fps_capacity / fps) as usize).sum();
    let counts: Vec<usize> = (1..=sc.streams.len().min(fit)).collect();
    let mut rows = Vec::new();
    for p in [PlacementPolicy::BestFit, PlacementPolicy::WorstFit] {
        rows.extend(attempt!("scheduler", sweep(fleet, &counts, fps, p)).into_iter().map(|(r, _)| r));
    }
    let w = art.create("sched_sweep.csv")?;
    attempt!("artifacts", write_sweep_csv(w, &rows));

    let largest = fleet.devices().iter().map(|d| d.fps_capacity).max().unwrap_or(0);
    let mut placement = Placement::new(fleet);
    let mut table = Vec::new();
    let mut samples = Vec::new();
    let (mut accepted, mut rejected, mut first_large) = (0, 0, None);
    for (i, d) in sc.streams.iter().enumerate() {
        let (device, status) = match placement.assign(fleet, d.stream_id, d.fps, policy) {
            Ok(dev) => {
                accepted += 1;
                if first_large.is_none() && fleet.device(dev).fps_capacity == largest {
                    first_large = Some(i + 1);
                }
                (fleet.device(dev).device_id.clone(), "placed")
            }
            Err(_) => {
                rejected += 1;
                (String::new(), "rejected")
            }
        };
        table.push(PlacementCsv { arrival: i + 1, stream: &d.name, fps: d.fps, device, status });
        samples.push(MetricsSample {
            tick: i as u64,
            t_ms: 0,
            n_streams: accepted,
            metrics: metrics(&placement, fleet),
            ingest_records: 0,
            ingest_records_per_s: 0.0,
            forecast_latency_ms: 0.0,
        });
    }
    art.csv("placement.csv", table)?;
    let final_metrics = metrics(&placement, fleet);
    Ok((
        SchedulerSummary {
            policy,
            accepted,
            rejected,
            sweep_rows: rows.len(),
            final_metrics,
            first_large_device_at: first_large,
        },
        samples,
    ))
}

fn open_store(sc: &Scenario, dir: &Path) -> Result<TimeSeriesStore, RunError> {
    if dir.exists() {
        attempt!("ingest", fs::remove_dir_all(dir));
    }
    Ok(attempt!("ingest", TimeSeriesStore::open(dir, StoreConfig::new(sc.streams.len(), sc.n_classes()))))
}

struct Replay {
    events: u64,
    late: u64,
    summaries: u64,
    conserved: bool,
}

/// Replays every stream through the aggregator into the store, in parallel.
fn fast_ingest(sc: &Scenario, store: &TimeSeriesStore, duration_s: u64) -> Result<Replay, RunError> {
    let n_classes = sc.n_classes();
    let agg_cfg = sc.config.intervals.aggregator();
    let per_stream: Vec<Result<Replay, RunError>> = sc
        .streams
        .par_iter()
        .zip(&sc.processes)
        .map(|(d, p)| {
            let events: Vec<_> = StreamTrace::new(d, p, duration_s as f64).map(|(e, _)| e).collect();
            let mut first_class: HashMap<u64, u16> = HashMap::new();
            for e in &events {
                first_class.entry(e.tracking_id).or_insert(e.class.0);
            }
            let mut distinct = vec![0u64; n_classes];
            for c in first_class.values() {
                distinct[*c as usize] += 1;
            }
            let (summaries, late) = attempt!("edge-worker", aggregate(&events, d.stream_id, n_classes, agg_cfg.clone(), duration_s));
            let mut counted = vec![0u64; n_classes];
            for s in &summaries {
                for r in &s.rows {
                    for (a, &b) in counted.iter_mut().zip(&r.counts) {
                        *a += b as u64;
                    }
                }
                attempt!("ingest", store.ingest(s));
            }
            Ok(Replay { events: events.len() as u64, late, summaries: summaries.len() as u64, conserved: counted == distinct })
        })
        .collect();
    let mut total = Replay { events: 0, late: 0, summaries: 0, conserved: true };
    for r in per_stream {
        let r = r?;
        total.events += r.events;
        total.late += r.late;
        total.summaries += r.summaries;
        total.conserved &= r.conserved;
    }
    Ok(total)
}

struct Live {
    store: Arc<TimeSeriesStore>,
    samples: Vec<MetricsSample>,
    summaries: u64,
    events: u64,
    late: u64,
}

fn realtime_ingest(sc: &Arc<Scenario>, opts: &RunOptions, duration_s: u64, thresholds: Thresholds) -> Result<Live, RunError> {
    let rt = attempt!("gateway", tokio::runtime::Builder::new_multi_thread().enable_all().build());
    rt.block_on(async {
        let gw = attempt!(
            "gateway",
            Gateway::start(
                sc.clone(),
                GatewayOptions {
                    pacing: Pacing::Realtime,
                    store_dir: opts.out_dir.join("store"),
                    model: Some(Arc::new(HistoricalAverage)),
                    thresholds,
                    duration_s: Some(duration_s as f64),
                },
            )
        );
        let (stop_tx, stop_rx) = tokio::sync::watch::channel(false);
        let server = match opts.api_addr {
            Some(addr) => {
                let listener = attempt!("gateway", tokio::net::TcpListener::bind(addr).await);
                tracing::info!("api listening on {}", attempt!("gateway", listener.local_addr()));
                let app = super::api::router(gw.clone());
                let mut rx = stop_rx.clone();
                Some(tokio::spawn(async move {
                    axum::serve(listener, app)
                        .with_graceful_shutdown(async move {
                            let _ = rx.wait_for(|v| *v).await;
                        })
                        .await
                }))
            }
            None => None,
        };
        let report = attempt!("gateway", gw.start_streams(gw.stream_names(), None).await);
        if !report.rejected.is_empty() {
            tracing::warn!("{} streams rejected by the scheduler", report.rejected.len());
        }
        gw.wait_idle().await;
        gw.shutdown().await;
        let _ = stop_tx.send(true);
        if let Some(s) = server {
            let _ = s.await;
        }
        let stats = gw.stream_stats();
        Ok(Live {
            store: gw.store.clone(),
            samples: gw.metrics_history(),
            summaries: stats.values().map(|s| s.summaries).sum(),
            events: stats.values().map(|s| s.events).sum(),
            late: stats.values().map(|s| s.late_events).sum(),
        })
    })
}

/// Writes `aggregate_flow.csv` and checks the store against the arrival oracle.
fn flow_stats(
    sc: &Scenario,
    store: &TimeSeriesStore,
    duration_s: u64,
    art: &mut Artifacts,
) -> Result<(FlowSummaryStats, bool), RunError> {
    let cams: Vec<StreamId> = sc.streams.iter().map(|d| d.stream_id).collect();
    let m = attempt!("ingest", store.query(&cams, 0, duration_s));
    let c = sc.n_classes();
    let mut per_second = vec![vec![0u64; c]; duration_s as usize];
    for cam in &m.counts {
        for (t, counts) in cam.iter().enumerate() {
            for (a, &b) in per_second[t].iter_mut().zip(counts) {
                *a += b as u64;
            }
        }
    }
    let matches = sc.streams.par_iter().zip(&sc.processes).all(|(d, p)| {
        let oracle = first_seen_counts(d, p, duration_s, c);
        oracle.iter().zip(&m.counts[d.stream_id.index()]).all(|(o, s)| o == s)
    });
    let names = sc.classes.names();
    let totals: Vec<u64> = per_second.iter().map(|c| c.iter().sum()).collect();
    // one column per class, so the header depends on the class list
    let mut w = art.create("aggregate_flow.csv")?;
    let header: Vec<String> = ["ts_s".to_string(), "total".to_string()].into_iter().chain(names.iter().cloned()).collect();
    attempt!("artifacts", writeln!(w, "{}", header.join(",")));
    for (t, counts) in per_second.iter().enumerate() {
        let cells: Vec<String> = counts.iter().map(u64::to_string).collect();
        attempt!("artifacts", writeln!(w, "{t},{},{}", totals[t], cells.join(",")));
    }
    attempt!("artifacts", w.flush());
    let (peak_ts, peak) = totals.iter().copied().enumerate().max_by_key(|&(t, v)| (v, std::cmp::Reverse(t))).unwrap_or((0, 0));
    let stats = FlowSummaryStats {
        peak_per_s: peak,
        peak_ts_s: peak_ts as u64,
        mean_per_s: totals.iter().sum::<u64>() as f64 / totals.len().max(1) as f64,
        fraction_above_bound: totals.iter().filter(|&&v| v > PEAK_BOUND).count() as f64 / totals.len().max(1) as f64,
        bound: PEAK_BOUND,
    };
    Ok((stats, matches))
}

fn graph_stats(
    sc: &Scenario,
    run: &MinuteSeries,
    thresholds: Thresholds,
    art: &mut Artifacts,
) -> Result<GraphSummary, RunError> {
    let (flows, residue) = attempt!("traffic-graph", pipeline::edge_flows(sc, run));
    let mut worst: f64 = 0.0;
    for (t, row) in flows.iter().enumerate() {
        let counts = run.values.column(t).sum();
        let err = (row.iter().sum::<f64>() + residue[t] - counts).abs() / counts.abs().max(1.0);
        worst = worst.max(err);
    }
    let rows: Vec<EdgeFlowRow> = pipeline::edge_flow_rows(sc, &flows, thresholds);
    let mut state_counts = BTreeMap::new();
    for s in [CongestionState::FreeFlow, CongestionState::Moderate, CongestionState::Heavy] {
        state_counts.insert(s.as_str().to_string(), rows.iter().filter(|r| r.state == s).count());
    }
    art.csv("edge_flows.csv", &rows)?;
    Ok(GraphSummary {
        road_vertices: sc.road.len(),
        coarse_vertices: sc.coarse.len(),
        super_edges: sc.coarse.edges().len(),
        thresholds,
        max_relative_mass_error: worst,
        state_counts,
    })
}

#[derive(Serialize)]
struct RmseRow<'a> {
    model: &'a str,
    horizon_min: usize,
    rmse: f64,
    rmse_smoothed: f64,
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    train_rmse: f64,
}

fn forecast_stats(
    sc: &Scenario,
    history: &MinuteSeries,
    run: &MinuteSeries,
    kind: ModelKind,
    art: &mut Artifacts,
) -> Result<ForecastSummary, RunError> {
    let f = &sc.config.forecast;
    let (lag, horizon) = (f.lag_minutes as usize, f.horizon_minutes as usize);
    let test = pipeline::synthetic_series(sc, "holdout", f.test_minutes as usize);
    let started = Instant::now();
    let (model, curve) = attempt!("forecaster", pipeline::fit_model(sc, kind, history));
    let train_wall_s = started.elapsed().as_secs_f64();
    let mut baselines: Vec<Box<dyn ForecastModel>> = vec![Box::new(HistoricalAverage), Box::new(SeasonalNaive::default())];
    baselines.retain(|b| b.model_id() != model.model_id());

    let mut rmse = BTreeMap::new();
    let mut rmse_smoothed = BTreeMap::new();
    let mut rows = Vec::new();
    for m in std::iter::once(&model).chain(baselines.iter()) {
        let r = attempt!("forecaster", evaluate(m.as_ref(), &test, lag, horizon));
        let s = smooth(&r, 3);
        rmse.insert(m.model_id().to_string(), r);
        rmse_smoothed.insert(m.model_id().to_string(), s);
    }
    for (id, r) in &rmse {
        for (h, v) in r.iter().enumerate() {
            rows.push(RmseRow { model: id, horizon_min: h + 1, rmse: *v, rmse_smoothed: rmse_smoothed[id][h] });
        }
    }
    art.csv("forecast_rmse.csv", rows)?;
    art.csv("train_curve.csv", curve.iter().enumerate().map(|(i, &v)| CurveRow { epoch: i + 1, train_rmse: v }))?;

    if run.minutes() >= lag {
        let t = run.minutes();
        let window = run.values.slice(ndarray::s![.., t - lag..t]);
        let pred = attempt!("forecaster", model.predict(window, horizon));
        let forecast = Forecast {
            issued_at_s: 60 * t as u64,
            model_id: model.model_id().to_string(),
            step_minutes: 1,
            horizon_steps: horizon,
            junctions: (0..sc.coarse.len()).map(|v| sc.coarse.name(v).to_string()).collect(),
            predictions: pred.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        art.json("forecast.json", &forecast)?;
    }

    let main = &rmse_smoothed[model.model_id()];
    let degrades = main.len() >= 2 && main.iter().all(|v| v.is_finite()) && main[main.len() - 1] > main[0];
    Ok(ForecastSummary {
        model: model.model_id().to_string(),
        lag_minutes: f.lag_minutes,
        horizon_minutes: f.horizon_minutes,
        train_minutes: f.train_minutes,
        test_minutes: f.test_minutes,
        rmse,
        rmse_smoothed,
        final_train_rmse: curve.last().copied(),
        degrades_with_horizon: degrades,
        train_wall_s,
    })
}

fn fl_stats(sc: &Scenario, art: &mut Artifacts) -> Result<Option<FlSummary>, RunError> {
    let Some(cfg) = &sc.config.fl else { return Ok(None) };
    let mut w = art.create("fl_rounds.jsonl")?;
    let log = attempt!("fl-sim", run_rounds(cfg, Some(&mut w)));
    attempt!("artifacts", w.flush());
    let mut frames = BTreeMap::new();
    let mut items = BTreeMap::new();
    for r in &log.records {
        if let RoundRecord::Client { round: 0, client_id, frames: f, items: n, .. } = r {
            frames.insert(client_id.clone(), *f);
            items.insert(client_id.clone(), *n);
        }
    }
    Ok(Some(FlSummary { rounds: cfg.rounds, accuracy: log.accuracy, frames_per_client: frames, items_per_client: items }))
}

/// Runs the full pipeline for `sc` and writes every artifact into `opts.out_dir`.
pub fn run_scenario(sc: &Arc<Scenario>, opts: &RunOptions) -> Result<RunReport, RunError> {
    let started = Instant::now();
    let duration_s = opts.duration_s.unwrap_or(sc.config.duration_s).min(sc.config.duration_s);
    attempt!("artifacts", fs::create_dir_all(&opts.out_dir));
    let mut art = Artifacts { dir: opts.out_dir.clone(), written: Vec::new() };

    let (scheduler, placement_samples) = schedule(sc, &mut art)?;
    tracing::info!(accepted = scheduler.accepted, "placement done");

    // Thresholds come from synthetic history, so live and batch runs agree.
    let f = &sc.config.forecast;
    let history = pipeline::synthetic_series(sc, "history", f.train_minutes as usize);
    let (history_flows, _) = attempt!("traffic-graph", pipeline::edge_flows(sc, &history));
    let thresholds = attempt!("traffic-graph", pipeline::thresholds(sc, &history_flows));

    let (store, samples, replay) = match opts.mode {
        Pacing::Fast => {
            let store = Arc::new(open_store(sc, &opts.out_dir.join("store"))?);
            let replay = fast_ingest(sc, &store, duration_s)?;
            (store, placement_samples, replay)
        }
        Pacing::Realtime => {
            let store_dir = opts.out_dir.join("store");
            if store_dir.exists() {
                attempt!("ingest", fs::remove_dir_all(&store_dir));
            }
            let live = realtime_ingest(sc, opts, duration_s, thresholds)?;
            let replay = Replay { events: live.events, late: live.late, summaries: live.summaries, conserved: true };
            (live.store, live.samples, replay)
        }
    };
    tracing::info!(records = store.record_count(), elapsed_s = started.elapsed().as_secs_f64(), "ingest done");
    art.csv("scheduler_metrics.csv", samples.iter().map(MetricsRow::from))?;

    let (flow, store_matches_trace) = flow_stats(sc, &store, duration_s, &mut art)?;
    let ingest = IngestSummary {
        records: store.record_count(),
        expected_records: sc.streams.len() as u64 * duration_s,
        summaries: replay.summaries,
        events: replay.events,
        late_events: replay.late,
        count_conservation: (opts.mode == Pacing::Fast).then_some(replay.conserved),
        store_matches_trace,
    };

    let run = attempt!("forecaster", pipeline::store_minute_series(sc, &store, 0, (duration_s / 60) as usize));
    let graph = graph_stats(sc, &run, thresholds, &mut art)?;
    let forecast = if opts.skip_forecast {
        None
    } else {
        Some(forecast_stats(sc, &history, &run, opts.model.unwrap_or(f.model), &mut art)?)
    };
    if forecast.is_some() {
        tracing::info!(elapsed_s = started.elapsed().as_secs_f64(), "forecast evaluation done");
    }
    let fl = if opts.skip_fl { None } else { fl_stats(sc, &mut art)? };

    let mut report = RunReport {
        scenario: sc.config.name.clone(),
        mode: opts.mode,
        duration_s,
        streams: sc.streams.len(),
        scheduler,
        ingest,
        flow,
        graph,
        forecast,
        fl,
        artifacts: Vec::new(),
        wall_s: 0.0,
    };
    art.written.push("report.json".into());
    report.artifacts = art.written.clone();
    report.wall_s = started.elapsed().as_secs_f64();
    art.json("report.json", &report)?;
    Ok(report)
}
