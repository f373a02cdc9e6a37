//! HTTP and WebSocket API under `/v1`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use super::pipeline;
use super::{Gateway, MetricsSample, PlacementRow, Snapshot, StartReport, StopReport};
use crate::forecast::Forecast;
use crate::graph::{discretize, CongestionState, Thresholds};
use crate::model::CameraId;
use crate::scheduler::{PlacementPolicy, SchedulerMetrics};
use crate::worker::emit::IngestAck;
use crate::worker::SummaryMessage;

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
    fn not_found(msg: impl Into<String>) -> Self {
        Self(StatusCode::NOT_FOUND, msg.into())
    }
    fn unavailable(msg: impl Into<String>) -> Self {
        Self(StatusCode::SERVICE_UNAVAILABLE, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Gw = State<Arc<Gateway>>;

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/state", get(state))
        .route("/v1/graph", get(graph))
        .route("/v1/streams", get(list_streams).post(start_streams).delete(stop_streams))
        .route("/v1/scheduler/metrics", get(scheduler_metrics))
        .route("/v1/flows", get(flows))
        .route("/v1/history", get(history))
        .route("/v1/forecast", get(forecast))
        .route("/v1/fl/rounds", get(fl_rounds).post(fl_start))
        .route("/v1/ingest", axum::routing::post(ingest))
        .route("/v1/nowcast", get(ws_nowcast))
        .route("/v1/forecast/stream", get(ws_forecast))
        .route("/v1/events", get(ws_events))
        .with_state(gw)
}

async fn state(State(gw): Gw) -> Json<Arc<Snapshot>> {
    Json(gw.snapshot())
}

async fn graph(State(gw): Gw) -> Json<serde_json::Value> {
    Json(json!({ "coarse": gw.scenario.coarse.export(), "thresholds": gw.thresholds }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StreamInfo {
    pub stream: String,
    pub junction: String,
    pub fps: u32,
    pub status: String,
    pub device: Option<String>,
}

async fn list_streams(State(gw): Gw) -> Json<Vec<StreamInfo>> {
    let snap = gw.snapshot();
    let placed: HashMap<&str, &PlacementRow> = snap.placement.iter().map(|r| (r.stream.as_str(), r)).collect();
    let rows = gw
        .scenario
        .streams
        .iter()
        .map(|d| {
            let p = placed.get(d.name.as_str());
            let status = if p.is_some() {
                "running"
            } else if snap.queued.contains(&d.name) {
                "queued"
            } else {
                "stopped"
            };
            StreamInfo {
                stream: d.name.clone(),
                junction: gw.scenario.road.name(d.junction_id).to_string(),
                fps: d.fps,
                status: status.into(),
                device: p.map(|r| r.device.clone()),
            }
        })
        .collect();
    Json(rows)
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct StreamsRequest {
    /// Empty means every stream of the scenario (start) or every running one (stop).
    #[serde(default)]
    pub streams: Vec<String>,
    #[serde(default)]
    pub policy: Option<PlacementPolicy>,
}

async fn start_streams(State(gw): Gw, body: Option<Json<StreamsRequest>>) -> ApiResult<StartReport> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let names = if req.streams.is_empty() { gw.stream_names() } else { req.streams };
    gw.start_streams(names, req.policy).await.map(Json).map_err(|e| ApiError::unavailable(e.to_string()))
}

async fn stop_streams(State(gw): Gw, body: Option<Json<StreamsRequest>>) -> ApiResult<StopReport> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let names = if req.streams.is_empty() {
        let snap = gw.snapshot();
        snap.placement.iter().map(|r| r.stream.clone()).chain(snap.queued.iter().cloned()).collect()
    } else {
        req.streams
    };
    gw.stop_streams(names).await.map(Json).map_err(|e| ApiError::unavailable(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub policy: PlacementPolicy,
    pub current: SchedulerMetrics,
    pub placement: Vec<PlacementRow>,
    pub history: Vec<MetricsSample>,
}

async fn scheduler_metrics(State(gw): Gw) -> Json<MetricsResponse> {
    let snap = gw.snapshot();
    Json(MetricsResponse {
        policy: snap.policy,
        current: snap.metrics,
        placement: snap.placement.clone(),
        history: gw.metrics_history(),
    })
}

fn resolve_cameras(gw: &Gateway, list: Option<&str>) -> Result<Vec<CameraId>, ApiError> {
    match list.filter(|s| !s.is_empty()) {
        None => Ok(gw.scenario.streams.iter().map(|d| d.stream_id).collect()),
        Some(l) => l
            .split(',')
            .map(|n| gw.scenario.stream_by_name(n.trim()).ok_or_else(|| ApiError::not_found(format!("unknown camera {n}"))))
            .collect(),
    }
}

#[derive(Debug, Deserialize)]
pub struct FlowsQuery {
    pub cameras: Option<String>,
    pub from: u64,
    pub to: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FlowsResponse {
    pub cameras: Vec<String>,
    pub from_s: u64,
    pub to_s: u64,
    pub classes: Vec<String>,
    /// `[camera][second][class]`
    pub counts: Vec<Vec<Vec<u32>>>,
    pub missing: Vec<Vec<bool>>,
}

async fn flows(State(gw): Gw, Query(q): Query<FlowsQuery>) -> ApiResult<FlowsResponse> {
    if q.from >= q.to {
        return Err(ApiError::bad(format!("empty range [{}, {})", q.from, q.to)));
    }
    if q.to - q.from > 6 * 3600 {
        return Err(ApiError::bad("range longer than six hours"));
    }
    let cams = resolve_cameras(&gw, q.cameras.as_deref())?;
    let m = gw.store.query(&cams, q.from, q.to).map_err(|e| ApiError::bad(e.to_string()))?;
    Ok(Json(FlowsResponse {
        cameras: cams.iter().map(|c| gw.scenario.streams[c.index()].name.clone()).collect(),
        from_s: m.from_s,
        to_s: m.to_s,
        classes: gw.scenario.classes.names().to_vec(),
        counts: m.counts,
        missing: m.missing,
    }))
}

#[derive(Debug, Deserialize)]
pub struct HistoryQuery {
    pub segment: Option<String>,
    pub camera: Option<String>,
    #[serde(default = "thirty")]
    pub minutes: usize,
    /// Window end in scenario seconds; defaults to the last complete minute.
    pub to: Option<u64>,
}

fn thirty() -> usize {
    30
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HistoryResponse {
    pub key: String,
    pub from_s: u64,
    pub step_s: u64,
    /// Vehicles per minute: super-edge flow for a segment, junction total for a camera.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
    /// Present for segments.
    pub states: Option<Vec<CongestionState>>,
    pub thresholds: Thresholds,
}

async fn history(State(gw): Gw, Query(q): Query<HistoryQuery>) -> ApiResult<HistoryResponse> {
    if q.minutes == 0 || q.minutes > 24 * 60 {
        return Err(ApiError::bad("minutes must be in 1..=1440"));
    }
    let sc = &gw.scenario;
    enum Key {
        Segment(usize),
        Camera(CameraId),
    }
    let key = match (&q.segment, &q.camera) {
        (Some(seg), None) => {
            Key::Segment(sc.coarse.edge_by_name(seg).ok_or_else(|| ApiError::not_found(format!("unknown segment {seg}")))?)
        }
        (None, Some(cam)) => {
            Key::Camera(sc.stream_by_name(cam).ok_or_else(|| ApiError::not_found(format!("unknown camera {cam}")))?)
        }
        _ => return Err(ApiError::bad("pass exactly one of segment or camera")),
    };
    let end = match q.to {
        Some(t) => t / 60 * 60,
        None => gw.store.latest_ts().map_or(0, |t| (t + 1) / 60 * 60),
    };
    let minutes = q.minutes.min((end / 60) as usize);
    if minutes == 0 {
        return Err(ApiError::unavailable("no complete minute ingested yet"));
    }
    let from_s = end - 60 * minutes as u64;
    match key {
        Key::Segment(e) => {
            let series = pipeline::store_minute_series(sc, &gw.store, from_s, minutes).map_err(|e| ApiError::bad(e.to_string()))?;
            let (flows, _) = pipeline::edge_flows(sc, &series).map_err(|e| ApiError::bad(e.to_string()))?;
            let values: Vec<f64> = flows.iter().map(|row| row[e]).collect();
            let edge = &sc.coarse.edges()[e];
            let missing = (0..minutes).map(|t| series.missing[[edge.u, t]] && series.missing[[edge.v, t]]).collect();
            Ok(Json(HistoryResponse {
                key: q.segment.unwrap_or_default(),
                from_s,
                step_s: 60,
                states: Some(values.iter().map(|&f| discretize(f, gw.thresholds)).collect()),
                values,
                missing,
                thresholds: gw.thresholds,
            }))
        }
        Key::Camera(c) => {
            let m = crate::forecast::build_minute_series(&gw.store, &[c], from_s, minutes)
                .map_err(|e| ApiError::bad(e.to_string()))?;
            Ok(Json(HistoryResponse {
                key: q.camera.unwrap_or_default(),
                from_s,
                step_s: 60,
                values: m.values.row(0).to_vec(),
                missing: m.missing.row(0).to_vec(),
                states: None,
                thresholds: gw.thresholds,
            }))
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct ForecastQuery {
    pub horizon: Option<u32>,
    #[serde(default = "one")]
    pub step: u32,
    pub cameras: Option<String>,
}

fn one() -> u32 {
    1
}

/// Latest forecast cut to the requested horizon and regrouped to `step`.
pub fn shape_forecast(f: &Forecast, horizon: Option<u32>, step: u32, junctions: &[String]) -> Result<Forecast, ApiError> {
    let max = f.horizon_steps as u32 * f.step_minutes;
    let horizon = horizon.unwrap_or(max);
    if step == 0 || horizon == 0 || horizon % step != 0 {
        return Err(ApiError::bad("horizon must be a positive multiple of step"));
    }
    if horizon > max {
        return Err(ApiError::bad(format!("horizon {horizon} exceeds the model horizon of {max} minutes")));
    }
    let mut cut = f.select(junctions).map_err(|n| ApiError::not_found(format!("unknown junction {n}")))?;
    let keep = (horizon / f.step_minutes) as usize;
    for row in cut.predictions.iter_mut() {
        row.truncate(keep);
    }
    cut.horizon_steps = keep;
    Ok(cut.regroup(step))
}

async fn forecast(State(gw): Gw, Query(q): Query<ForecastQuery>) -> ApiResult<Forecast> {
    let svc = gw.forecast_service().ok_or_else(|| ApiError::unavailable("forecasting is disabled"))?;
    let latest = svc.latest().ok_or_else(|| ApiError::unavailable("no forecast issued yet"))?;
    let names: Vec<String> = q.cameras.as_deref().map_or(Vec::new(), |c| c.split(',').map(|s| s.trim().to_string()).collect());
    shape_forecast(&latest, q.horizon, q.step, &names).map(Json)
}

async fn fl_rounds(State(gw): Gw) -> Json<Vec<crate::fl::RoundRecord>> {
    Json(gw.fl_rounds())
}

async fn fl_start(State(gw): Gw) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    match gw.spawn_fl_run() {
        Ok(true) => Ok((StatusCode::ACCEPTED, Json(json!({ "started": true })))),
        Ok(false) => Err(ApiError(StatusCode::CONFLICT, "a run is already in progress".into())),
        Err(e) => Err(ApiError::bad(e)),
    }
}

async fn ingest(State(gw): Gw, Json(msg): Json<SummaryMessage>) -> ApiResult<IngestAck> {
    let cameras: HashMap<String, CameraId> =
        gw.scenario.streams.iter().map(|d| (d.name.clone(), d.stream_id)).collect();
    let store = gw.store.clone();
    tokio::task::spawn_blocking(move || super::ingest::ingest_message(&store, &cameras, msg))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
        .map_err(ApiError::bad)
}

async fn send_json<T: Serialize>(ws: &mut WebSocket, v: &T) -> bool {
    let text = serde_json::to_string(v).expect("frames serialize");
    ws.send(Message::Text(text)).await.is_ok()
}

#[derive(Debug, Deserialize)]
pub struct NowcastQuery {
    pub cameras: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NowcastMessage {
    pub seq: u64,
    pub ts_s: u64,
    pub per_camera: BTreeMap<String, Vec<u32>>,
}

/// How often buffered nowcast seconds are pushed.
const NOWCAST_FLUSH: Duration = Duration::from_millis(50);

async fn ws_nowcast(State(gw): Gw, Query(q): Query<NowcastQuery>, up: WebSocketUpgrade) -> Result<Response, ApiError> {
    let cams = match q.cameras.as_deref() {
        None | Some("") => Vec::new(),
        c => resolve_cameras(&gw, c)?,
    };
    Ok(up.on_upgrade(move |ws| nowcast_session(gw, cams, ws)))
}

async fn nowcast_session(gw: Arc<Gateway>, cams: Vec<CameraId>, mut ws: WebSocket) {
    let mut sub = gw.store.subscribe_nowcast(&cams);
    let mut pending: BTreeMap<u64, BTreeMap<String, Vec<u32>>> = BTreeMap::new();
    let mut flush = tokio::time::interval(NOWCAST_FLUSH);
    let mut seq = 0u64;
    loop {
        tokio::select! {
            frame = sub.next() => match frame {
                Ok(Some(f)) => {
                    let entry = pending.entry(f.ts_s).or_default();
                    for (c, counts) in f.per_camera {
                        entry.insert(gw.scenario.streams[c.index()].name.clone(), counts);
                    }
                }
                Ok(None) => break,
                Err(overflow) => {
                    let _ = send_json(&mut ws, &json!({ "error": overflow.to_string() })).await;
                    break;
                }
            },
            _ = flush.tick() => {
                for (ts_s, per_camera) in std::mem::take(&mut pending) {
                    seq += 1;
                    if !send_json(&mut ws, &NowcastMessage { seq, ts_s, per_camera }).await {
                        return;
                    }
                }
            }
            msg = ws.recv() => if !matches!(msg, Some(Ok(_))) { return },
        }
    }
    let _ = ws.close().await;
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ForecastMessage {
    pub seq: u64,
    pub forecast: Forecast,
}

async fn ws_forecast(State(gw): Gw, up: WebSocketUpgrade) -> Result<Response, ApiError> {
    let svc = gw.forecast_service().cloned().ok_or_else(|| ApiError::unavailable("forecasting is disabled"))?;
    Ok(up.on_upgrade(move |mut ws| async move {
        let mut rx = svc.subscribe();
        let mut seq = 0u64;
        if let Some(f) = svc.latest() {
            seq += 1;
            if !send_json(&mut ws, &ForecastMessage { seq, forecast: (*f).clone() }).await {
                return;
            }
        }
        loop {
            tokio::select! {
                r = rx.recv() => match r {
                    Ok(f) => {
                        seq += 1;
                        if !send_json(&mut ws, &ForecastMessage { seq, forecast: (*f).clone() }).await {
                            return;
                        }
                    }
                    // skipped frames show up as a sequence gap
                    Err(RecvError::Lagged(n)) => seq += n,
                    Err(RecvError::Closed) => break,
                },
                msg = ws.recv() => if !matches!(msg, Some(Ok(_))) { return },
            }
        }
        let _ = ws.close().await;
    }))
}

async fn ws_events(State(gw): Gw, up: WebSocketUpgrade) -> Response {
    up.on_upgrade(move |mut ws| async move {
        let mut rx = gw.events.subscribe();
        let snapshot = |gw: &Gateway| json!({ "seq": gw.events.last_seq(), "type": "snapshot", "snapshot": gw.snapshot() });
        if !send_json(&mut ws, &snapshot(&gw)).await {
            return;
        }
        loop {
            tokio::select! {
                r = rx.recv() => match r {
                    Ok(ev) => if !send_json(&mut ws, &ev).await { return },
                    // resynchronise the client with a fresh snapshot
                    Err(RecvError::Lagged(_)) => if !send_json(&mut ws, &snapshot(&gw)).await { return },
                    Err(RecvError::Closed) => break,
                },
                msg = ws.recv() => if !matches!(msg, Some(Ok(_))) { return },
            }
        }
        let _ = ws.close().await;
    })
}
