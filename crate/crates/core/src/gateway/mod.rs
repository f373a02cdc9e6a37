//! Orchestration surface: stream lifecycle, placement snapshots, metrics,
//! forecasts and the HTTP/WebSocket API built on top of them.
//!
//! One control task owns the placement and the running data-plane tasks and
//! applies start/stop commands in order. Everything readers see goes through
//! immutable [`Snapshot`]s published on a watch channel.

pub mod api;
pub mod ingest;
pub mod pipeline;
pub mod runner;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::emulator::serve::{serve, Pacing, ServeConfig};
use crate::fl::RoundRecord;
use crate::forecast::serve::{ForecastService, LagSource, ServeReport};
use crate::forecast::{ForecastError, ForecastModel};
use crate::graph::Thresholds;
use crate::model::StreamId;
use crate::scenario::Scenario;
use crate::scheduler::{metrics, Placement, PlacementPolicy, SchedulerError, SchedulerMetrics};
use crate::store::{StoreConfig, StoreError, TimeSeriesStore};
use crate::worker::{AggregateError, Aggregator, FlowSummary};

/// Samples kept in each metrics ring buffer.
pub const METRICS_RING: usize = 3600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Idle,
    Running,
    Draining,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementRow {
    pub stream: String,
    pub device: String,
    pub fps: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleHealth {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ModuleHealth {
    fn ok() -> Self {
        Self { ok: true, detail: None }
    }
}

/// Immutable view of the control plane.
#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub version: u64,
    pub scenario: String,
    pub state: RunState,
    pub policy: PlacementPolicy,
    /// Sorted by stream name.
    pub placement: Vec<PlacementRow>,
    pub queued: Vec<String>,
    pub metrics: SchedulerMetrics,
    pub health: BTreeMap<String, ModuleHealth>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub stream: String,
    /// Stable error name, e.g. `CapacityExhausted` or `UnknownStream`.
    pub code: String,
    pub error: String,
}

impl Rejection {
    fn new(stream: String, code: &str, error: impl ToString) -> Self {
        Self { stream, code: code.into(), error: error.to_string() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartReport {
    pub accepted: Vec<PlacementRow>,
    pub queued: Vec<String>,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopReport {
    pub stopped: Vec<String>,
    /// Queued streams admitted with the freed capacity.
    pub admitted: Vec<PlacementRow>,
    pub errors: Vec<Rejection>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Placement { added: Vec<PlacementRow>, removed: Vec<String>, queued: Vec<String> },
    State { state: RunState },
    Health { module: String, health: ModuleHealth },
}

#[derive(Debug, Clone, Serialize)]
pub struct GatewayEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Broadcast of control-plane events with a gap-free sequence.
pub struct EventBus {
    tx: broadcast::Sender<GatewayEvent>,
    seq: Mutex<u64>,
}

impl EventBus {
    fn new() -> Self {
        Self { tx: broadcast::channel(1024).0, seq: Mutex::new(0) }
    }

    fn publish(&self, kind: EventKind) {
        let mut seq = self.seq.lock();
        *seq += 1;
        let _ = self.tx.send(GatewayEvent { seq: *seq, kind });
    }

    pub fn subscribe(&self) -> broadcast::Receiver<GatewayEvent> {
        self.tx.subscribe()
    }

    pub fn last_seq(&self) -> u64 {
        *self.seq.lock()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub tick: u64,
    pub t_ms: u64,
    pub n_streams: usize,
    #[serde(flatten)]
    pub metrics: SchedulerMetrics,
    pub ingest_records: u64,
    pub ingest_records_per_s: f64,
    pub forecast_latency_ms: f64,
}

#[derive(Clone)]
pub struct GatewayOptions {
    pub pacing: Pacing,
    pub store_dir: PathBuf,
    /// `None` runs without a forecast service.
    pub model: Option<Arc<dyn ForecastModel>>,
    pub thresholds: Thresholds,
    /// Overrides the scenario's trace length.
    pub duration_s: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("gateway is shut down")]
    Closed,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StreamStats {
    pub frames: u64,
    pub events: u64,
    pub late_events: u64,
    pub summaries: u64,
    pub ingest_errors: u64,
}

enum Command {
    Start { names: Vec<String>, policy: Option<PlacementPolicy>, reply: oneshot::Sender<StartReport> },
    Stop { names: Vec<String>, reply: oneshot::Sender<StopReport> },
    Finished { stream: StreamId },
    Shutdown { reply: oneshot::Sender<()> },
}

pub struct Gateway {
    pub scenario: Arc<Scenario>,
    pub store: Arc<TimeSeriesStore>,
    pub events: EventBus,
    pub thresholds: Thresholds,
    forecast: Option<Arc<ForecastService>>,
    cmd: mpsc::UnboundedSender<Command>,
    snapshot: watch::Receiver<Arc<Snapshot>>,
    epoch: Instant,
    ring: Mutex<VecDeque<MetricsSample>>,
    stream_stats: Mutex<BTreeMap<String, StreamStats>>,
    fl_rounds: Mutex<Vec<RoundRecord>>,
    fl_running: std::sync::atomic::AtomicBool,
    ticks: AtomicU64,
    shutdown: watch::Sender<bool>,
    services: Mutex<Vec<JoinHandle<()>>>,
    forecast_task: Mutex<Option<JoinHandle<ServeReport>>>,
}

impl Gateway {
    /// Opens the store and spawns the control, metrics and forecast tasks on
    /// the current runtime.
    pub fn start(scenario: Arc<Scenario>, opts: GatewayOptions) -> Result<Arc<Self>, GatewayError> {
        let store = Arc::new(TimeSeriesStore::open(
            &opts.store_dir,
            StoreConfig::new(scenario.streams.len(), scenario.n_classes()),
        )?);
        let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
        let policy = scenario.config.scheduler.policy;
        let mut health = BTreeMap::new();
        for m in ["scheduler", "ingest", "forecaster", "streams"] {
            health.insert(m.to_string(), ModuleHealth::ok());
        }
        let snap = Snapshot {
            version: 0,
            scenario: scenario.config.name.clone(),
            state: RunState::Idle,
            policy,
            placement: Vec::new(),
            queued: Vec::new(),
            metrics: SchedulerMetrics::default(),
            health,
        };
        let (snap_tx, snap_rx) = watch::channel(Arc::new(snap));
        let forecast = opts.model.clone().map(|m| {
            let f = &scenario.config.forecast;
            ForecastService::new(
                m,
                (0..scenario.coarse.len()).map(|v| scenario.coarse.name(v).to_string()).collect(),
                f.lag_minutes as usize,
                f.horizon_minutes as usize,
                Duration::from_secs(scenario.config.intervals.forecast_period_s.max(1)),
            )
        });
        let (shutdown, _) = watch::channel(false);
        let gw = Arc::new(Self {
            scenario: scenario.clone(),
            store,
            events: EventBus::new(),
            thresholds: opts.thresholds,
            forecast,
            cmd: cmd_tx.clone(),
            snapshot: snap_rx,
            epoch: Instant::now(),
            ring: Mutex::new(VecDeque::with_capacity(METRICS_RING)),
            stream_stats: Mutex::new(BTreeMap::new()),
            fl_rounds: Mutex::new(Vec::new()),
            fl_running: Default::default(),
            ticks: AtomicU64::new(0),
            shutdown,
            services: Mutex::new(Vec::new()),
            forecast_task: Mutex::new(None),
        });

        let actor = Actor {
            gw: Arc::downgrade(&gw),
            placement: Placement::new(&scenario.fleet),
            running: HashMap::new(),
            queue: VecDeque::new(),
            policy,
            state: RunState::Idle,
            snap_tx,
            cmd_tx,
            pacing: opts.pacing,
            duration_s: opts.duration_s.unwrap_or(scenario.config.duration_s as f64),
        };
        let mut services = vec![tokio::spawn(actor.run(cmd_rx))];
        services.push(tokio::spawn(sampler(Arc::downgrade(&gw), gw.shutdown.subscribe())));
        *gw.services.lock() = services;
        if let Some(svc) = gw.forecast.clone() {
            let source: Arc<dyn LagSource> = Arc::new(StoreLagSource { gw: Arc::downgrade(&gw) });
            *gw.forecast_task.lock() = Some(tokio::spawn(svc.run(source, gw.shutdown.subscribe())));
        }
        Ok(gw)
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.borrow().clone()
    }

    pub fn watch_snapshot(&self) -> watch::Receiver<Arc<Snapshot>> {
        self.snapshot.clone()
    }

    pub fn forecast_service(&self) -> Option<&Arc<ForecastService>> {
        self.forecast.as_ref()
    }

    pub fn metrics_history(&self) -> Vec<MetricsSample> {
        self.ring.lock().iter().cloned().collect()
    }

    pub fn stream_stats(&self) -> BTreeMap<String, StreamStats> {
        self.stream_stats.lock().clone()
    }

    pub fn fl_rounds(&self) -> Vec<RoundRecord> {
        self.fl_rounds.lock().clone()
    }

    pub fn set_fl_rounds(&self, records: Vec<RoundRecord>) {
        *self.fl_rounds.lock() = records;
    }

    /// Runs the scenario's FL rounds in the background; false if one is running.
    pub fn spawn_fl_run(self: &Arc<Self>) -> Result<bool, String> {
        let cfg = self.scenario.config.fl.clone().ok_or("scenario has no fl section")?;
        if self.fl_running.swap(true, Ordering::SeqCst) {
            return Ok(false);
        }
        let gw = self.clone();
        tokio::task::spawn_blocking(move || {
            match crate::fl::run_rounds(&cfg, None) {
                Ok(log) => gw.set_fl_rounds(log.records),
                Err(e) => tracing::warn!("fl run failed: {e}"),
            }
            gw.fl_running.store(false, Ordering::SeqCst);
        });
        Ok(true)
    }

    /// Scenario seconds since the gateway started.
    pub fn elapsed_s(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    async fn call<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Result<T, GatewayError> {
        let (tx, rx) = oneshot::channel();
        self.cmd.send(make(tx)).map_err(|_| GatewayError::Closed)?;
        rx.await.map_err(|_| GatewayError::Closed)
    }

    /// Places and starts the named streams; partial success is normal.
    pub async fn start_streams(&self, names: Vec<String>, policy: Option<PlacementPolicy>) -> Result<StartReport, GatewayError> {
        self.call(|reply| Command::Start { names, policy, reply }).await
    }

    /// Stops the named streams, flushing their last windows before returning.
    pub async fn stop_streams(&self, names: Vec<String>) -> Result<StopReport, GatewayError> {
        self.call(|reply| Command::Stop { names, reply }).await
    }

    pub fn stream_names(&self) -> Vec<String> {
        self.scenario.streams.iter().map(|d| d.name.clone()).collect()
    }

    /// Stops every stream and background task. Returns the forecast report.
    pub async fn shutdown(&self) -> Option<ServeReport> {
        let _ = self.call(|reply| Command::Shutdown { reply }).await;
        let _ = self.shutdown.send(true);
        let handles: Vec<_> = self.services.lock().drain(..).collect();
        for h in handles {
            let _ = h.await;
        }
        let task = self.forecast_task.lock().take();
        match task {
            Some(t) => t.await.ok(),
            None => None,
        }
    }

    /// Waits until no stream is placed or queued.
    pub async fn wait_idle(&self) {
        let mut rx = self.snapshot.clone();
        let _ = rx.wait_for(|s| s.placement.is_empty() && s.queued.is_empty() && s.state == RunState::Idle).await;
    }
}

/// Lag window of junction totals ending at the last complete minute in the store.
struct StoreLagSource {
    gw: std::sync::Weak<Gateway>,
}

impl LagSource for StoreLagSource {
    fn window(&self, lag: usize) -> Result<(u64, Array2<f64>), ForecastError> {
        let gw = self.gw.upgrade().ok_or_else(|| ForecastError::InvalidRequest("gateway gone".into()))?;
        let latest = gw.store.latest_ts().ok_or(ForecastError::TooShort { minutes: 0, needed: lag })?;
        let end = (latest + 1) / 60 * 60;
        if end < 60 * lag as u64 {
            return Err(ForecastError::TooShort { minutes: (end / 60) as usize, needed: lag });
        }
        let series = pipeline::store_minute_series(&gw.scenario, &gw.store, end - 60 * lag as u64, lag)?;
        Ok((end, series.values))
    }
}

async fn sampler(gw: std::sync::Weak<Gateway>, mut shutdown: watch::Receiver<bool>) {
    let period = match gw.upgrade() {
        Some(g) => Duration::from_millis(g.scenario.config.intervals.metrics_period_ms.max(10)),
        None => return,
    };
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let mut last: Option<(u64, Instant)> = None;
    loop {
        tokio::select! {
            biased;
            _ = shutdown.changed() => break,
            _ = interval.tick() => {}
        }
        let Some(g) = gw.upgrade() else { break };
        let snap = g.snapshot();
        let records = g.store.record_count();
        let now = Instant::now();
        let rate = match last {
            Some((r, t)) => (records - r) as f64 / now.duration_since(t).as_secs_f64().max(1e-9),
            None => 0.0,
        };
        last = Some((records, now));
        let sample = MetricsSample {
            tick: g.ticks.fetch_add(1, Ordering::Relaxed),
            t_ms: g.epoch.elapsed().as_millis() as u64,
            n_streams: snap.placement.len(),
            metrics: snap.metrics,
            ingest_records: records,
            ingest_records_per_s: rate,
            forecast_latency_ms: g.forecast.as_ref().map_or(0.0, |f| f.report().mean_latency_ms),
        };
        let mut ring = g.ring.lock();
        if ring.len() == METRICS_RING {
            ring.pop_front();
        }
        ring.push_back(sample);
    }
}

struct RunningStream {
    stop: watch::Sender<bool>,
    task: JoinHandle<StreamStats>,
}

struct Actor {
    gw: std::sync::Weak<Gateway>,
    placement: Placement,
    running: HashMap<StreamId, RunningStream>,
    queue: VecDeque<StreamId>,
    policy: PlacementPolicy,
    state: RunState,
    snap_tx: watch::Sender<Arc<Snapshot>>,
    cmd_tx: mpsc::UnboundedSender<Command>,
    pacing: Pacing,
    duration_s: f64,
}

impl Actor {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Command>) {
        while let Some(cmd) = rx.recv().await {
            let Some(gw) = self.gw.upgrade() else { break };
            match cmd {
                Command::Start { names, policy, reply } => {
                    let r = self.start(&gw, names, policy);
                    let _ = reply.send(r);
                }
                Command::Stop { names, reply } => {
                    let r = self.stop(&gw, names).await;
                    let _ = reply.send(r);
                }
                Command::Finished { stream } => {
                    if self.running.contains_key(&stream) {
                        let name = gw.scenario.streams[stream.index()].name.clone();
                        self.stop(&gw, vec![name]).await;
                    }
                }
                Command::Shutdown { reply } => {
                    let names: Vec<String> = self
                        .running
                        .keys()
                        .chain(self.queue.iter())
                        .map(|s| gw.scenario.streams[s.index()].name.clone())
                        .collect();
                    self.queue.clear();
                    self.stop(&gw, names).await;
                    let _ = reply.send(());
                    break;
                }
            }
        }
    }

    fn row(&self, gw: &Gateway, s: StreamId) -> PlacementRow {
        let d = self.placement.device_of(s).expect("placed");
        PlacementRow {
            stream: gw.scenario.streams[s.index()].name.clone(),
            device: gw.scenario.fleet.device(d).device_id.clone(),
            fps: gw.scenario.streams[s.index()].fps,
        }
    }

    fn publish(&mut self, gw: &Gateway, health: Option<(&str, ModuleHealth)>) {
        let prev = self.snap_tx.borrow().clone();
        let mut placement: Vec<PlacementRow> =
            self.placement.assignments().map(|(s, _, _)| self.row(gw, s)).collect();
        placement.sort_by(|a, b| a.stream.cmp(&b.stream));
        let mut healths = prev.health.clone();
        if let Some((m, h)) = health {
            if healths.get(m) != Some(&h) {
                gw.events.publish(EventKind::Health { module: m.to_string(), health: h.clone() });
            }
            healths.insert(m.to_string(), h);
        }
        if prev.state != self.state {
            gw.events.publish(EventKind::State { state: self.state });
        }
        let snap = Snapshot {
            version: prev.version + 1,
            scenario: prev.scenario.clone(),
            state: self.state,
            policy: self.policy,
            placement,
            queued: self.queue.iter().map(|s| gw.scenario.streams[s.index()].name.clone()).collect(),
            metrics: metrics(&self.placement, &gw.scenario.fleet),
            health: healths,
        };
        self.snap_tx.send_replace(Arc::new(snap));
    }

    fn start(&mut self, gw: &Arc<Gateway>, names: Vec<String>, policy: Option<PlacementPolicy>) -> StartReport {
        if let Some(p) = policy {
            self.policy = p;
        }
        let mut report = StartReport::default();
        for name in names {
            let Some(s) = gw.scenario.stream_by_name(&name) else {
                report.rejected.push(Rejection::new(name, "UnknownStream", "unknown stream"));
                continue;
            };
            if self.running.contains_key(&s) || self.queue.contains(&s) {
                report.rejected.push(Rejection::new(name, "AlreadyRunning", "already running"));
                continue;
            }
            let fps = gw.scenario.streams[s.index()].fps;
            match self.placement.assign(&gw.scenario.fleet, s, fps, self.policy) {
                Ok(_) => {
                    self.launch(gw, s);
                    report.accepted.push(self.row(gw, s));
                }
                Err(e @ SchedulerError::CapacityExhausted { .. }) => {
                    if gw.scenario.config.scheduler.admission_queue {
                        self.queue.push_back(s);
                        report.queued.push(name);
                    } else {
                        report.rejected.push(Rejection::new(name, "CapacityExhausted", e));
                    }
                }
                Err(e) => report.rejected.push(Rejection::new(name, "SchedulerError", e)),
            }
        }
        if !self.running.is_empty() {
            self.state = RunState::Running;
        }
        if !report.accepted.is_empty() || !report.queued.is_empty() {
            gw.events.publish(EventKind::Placement {
                added: report.accepted.clone(),
                removed: Vec::new(),
                queued: report.queued.clone(),
            });
        }
        self.publish(gw, None);
        report
    }

    fn launch(&mut self, gw: &Arc<Gateway>, s: StreamId) {
        let desc = gw.scenario.streams[s.index()].clone();
        let process = gw.scenario.processes[s.index()].clone();
        let start_s = match self.pacing {
            Pacing::Realtime => gw.elapsed_s(),
            Pacing::Fast => 0.0,
        };
        let cfg = ServeConfig {
            pacing: self.pacing,
            duration_s: self.duration_s,
            start_frame: (start_s * desc.fps as f64) as u64,
            ..Default::default()
        };
        let (stop, stop_rx) = watch::channel(false);
        let task = tokio::spawn(data_plane(gw.clone(), s, desc, process, cfg, stop_rx, self.cmd_tx.clone()));
        self.running.insert(s, RunningStream { stop, task });
    }

    async fn stop(&mut self, gw: &Arc<Gateway>, names: Vec<String>) -> StopReport {
        let mut report = StopReport::default();
        let mut stopping = Vec::new();
        for name in names {
            match gw.scenario.stream_by_name(&name) {
                Some(s) if self.running.contains_key(&s) => stopping.push((name, s)),
                Some(s) if self.queue.contains(&s) => {
                    self.queue.retain(|q| *q != s);
                    report.stopped.push(name);
                }
                Some(_) => report.errors.push(Rejection::new(name, "NotRunning", "stream is not running")),
                None => report.errors.push(Rejection::new(name, "UnknownStream", "unknown stream")),
            }
        }
        if stopping.is_empty() {
            self.publish(gw, None);
            return report;
        }
        if stopping.len() == self.running.len() {
            self.state = RunState::Draining;
            self.publish(gw, None);
        }
        let mut failures = 0;
        for (_, s) in &stopping {
            let _ = self.running[s].stop.send(true);
        }
        for (name, s) in &stopping {
            let r = self.running.remove(s).expect("checked");
            match r.task.await {
                Ok(st) => {
                    failures += st.ingest_errors;
                    gw.stream_stats.lock().insert(name.clone(), st);
                }
                Err(e) => {
                    failures += 1;
                    tracing::warn!(stream = %name, "data plane task failed: {e}");
                }
            }
            self.placement.remove(*s).expect("running streams are placed");
            report.stopped.push(name.clone());
        }
        // Freed capacity goes to the admission queue in arrival order.
        let mut still = VecDeque::new();
        while let Some(q) = self.queue.pop_front() {
            let fps = gw.scenario.streams[q.index()].fps;
            if self.placement.assign(&gw.scenario.fleet, q, fps, self.policy).is_ok() {
                self.launch(gw, q);
                report.admitted.push(self.row(gw, q));
            } else {
                still.push_back(q);
            }
        }
        self.queue = still;
        self.state = if self.running.is_empty() { RunState::Idle } else { RunState::Running };
        gw.events.publish(EventKind::Placement {
            added: report.admitted.clone(),
            removed: report.stopped.clone(),
            queued: Vec::new(),
        });
        let health = if failures == 0 {
            ModuleHealth::ok()
        } else {
            ModuleHealth { ok: false, detail: Some(format!("{failures} summaries failed to ingest")) }
        };
        self.publish(gw, Some(("ingest", health)));
        report
    }
}

fn ingest_all(store: &TimeSeriesStore, out: &mut Vec<FlowSummary>, stats: &mut StreamStats) {
    for s in out.drain(..) {
        stats.summaries += 1;
        if let Err(e) = store.ingest(&s) {
            stats.ingest_errors += 1;
            tracing::warn!("ingest failed: {e}");
        }
    }
}

/// Emulator → aggregator → store for one stream, until the trace ends or a
/// stop is signalled. The last partial window is flushed either way.
async fn data_plane(
    gw: Arc<Gateway>,
    id: StreamId,
    desc: crate::model::StreamDescriptor,
    process: crate::emulator::TrafficProcess,
    cfg: ServeConfig,
    mut stop: watch::Receiver<bool>,
    done: mpsc::UnboundedSender<Command>,
) -> StreamStats {
    let start_s = desc.frame_ts_ms(cfg.start_frame) / 1000;
    let mut server = serve(&desc, &process, cfg);
    let mut agg = Aggregator::new(id, gw.scenario.n_classes(), gw.scenario.config.intervals.aggregator())
        .expect("window validated with the scenario")
        .starting_at(start_s);
    let mut stats = StreamStats::default();
    let mut out = Vec::new();
    let mut last_ms = None;
    let mut stopped = false;
    loop {
        tokio::select! {
            biased;
            r = stop.changed(), if !stopped => {
                if r.is_err() || *stop.borrow() {
                    server.stop();
                    stopped = true;
                }
            }
            batch = server.frames.recv() => {
                let Some(b) = batch else { break };
                stats.frames += 1;
                last_ms = Some(b.ts_ms);
                if b.events.is_empty() {
                    agg.advance_to(b.ts_ms, &mut out);
                }
                for e in &b.events {
                    match agg.push(e, &mut out) {
                        Ok(()) | Err(AggregateError::LateEvent { .. }) => {}
                        Err(e) => tracing::warn!(stream = %desc.name, "{e}"),
                    }
                }
                if !out.is_empty() {
                    ingest_all(&gw.store, &mut out, &mut stats);
                }
            }
        }
    }
    if let Some(ms) = last_ms {
        agg.finish(ms / 1000 + 1, &mut out);
    }
    stats.events = agg.events();
    stats.late_events = agg.late_events();
    ingest_all(&gw.store, &mut out, &mut stats);
    server.join().await;
    if !stopped {
        let _ = done.send(Command::Finished { stream: id });
    }
    stats
}
