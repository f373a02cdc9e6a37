mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use cityfabric::emulator::serve::Pacing;
use cityfabric::gateway::api::{self, FlowsResponse, ForecastMessage, NowcastMessage, StreamInfo};
use cityfabric::gateway::{Gateway, RunState, StartReport, StopReport};
use cityfabric::scenario::load_scenario;
use futures::StreamExt;
use serde_json::Value;
use tokio_tungstenite::tungstenite::Message;

use common::{options, uniform_scenario};

async fn serve(gw: Arc<Gateway>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, api::router(gw)).await.unwrap() });
    format!("127.0.0.1:{}", addr.port())
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn ws(addr: &str, path: &str) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}{path}")).await.unwrap().0
}

async fn next_json(ws: &mut Ws, within: Duration) -> Value {
    loop {
        let msg = tokio::time::timeout(within, ws.next()).await.expect("frame in time").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn oversubscription_accepts_capacity_and_rejects_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let sc = Arc::new(uniform_scenario(200, 10, 200, 600));
    let gw = Gateway::start(sc.clone(), options(&sc, Pacing::Realtime, dir.path(), false)).unwrap();
    let report = gw.start_streams(gw.stream_names(), None).await.unwrap();
    assert_eq!(report.accepted.len(), 80);
    assert_eq!(report.rejected.len(), 120);
    assert!(report.rejected.iter().all(|r| r.code == "CapacityExhausted"), "{:?}", report.rejected[0]);
    let snap = gw.snapshot();
    assert_eq!(snap.placement.len(), 80);
    assert_eq!(snap.metrics.cumulative_fps, 2000);
    assert_eq!(snap.state, RunState::Running);
    gw.shutdown().await;
    assert_eq!(gw.snapshot().state, RunState::Idle);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn start_then_stop_restores_placement() {
    let dir = tempfile::tempdir().unwrap();
    let sc = Arc::new(uniform_scenario(40, 4, 200, 600));
    let gw = Gateway::start(sc.clone(), options(&sc, Pacing::Realtime, dir.path(), false)).unwrap();
    let names = gw.stream_names();
    gw.start_streams(names[..7].to_vec(), None).await.unwrap();
    let before = gw.snapshot();

    let extra = names[7..25].to_vec();
    let started = gw.start_streams(extra.clone(), None).await.unwrap();
    assert_eq!(started.accepted.len(), 18);
    let stopped = gw.stop_streams(extra).await.unwrap();
    assert_eq!(stopped.stopped.len(), 18);
    assert!(stopped.errors.is_empty());
    let after = gw.snapshot();
    assert_eq!(after.placement, before.placement);
    assert_eq!(after.metrics, before.metrics);

    let again = gw.start_streams(names[..1].to_vec(), None).await.unwrap();
    assert_eq!(again.rejected[0].code, "AlreadyRunning");
    let unknown = gw.stop_streams(vec!["nope".into()]).await.unwrap();
    assert_eq!(unknown.errors[0].code, "UnknownStream");
    gw.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_stream_lifecycle_and_events_are_gap_free() {
    let dir = tempfile::tempdir().unwrap();
    let sc = Arc::new(uniform_scenario(12, 2, 100, 600));
    let gw = Gateway::start(sc.clone(), options(&sc, Pacing::Realtime, dir.path(), false)).unwrap();
    let addr = serve(gw.clone()).await;
    let http = reqwest::Client::new();

    let mut events = ws(&addr, "/v1/events").await;
    let first = next_json(&mut events, Duration::from_secs(5)).await;
    assert_eq!(first["type"], "snapshot");
    let mut seq = first["seq"].as_u64().unwrap();

    let start: StartReport = http
        .post(format!("http://{addr}/v1/streams"))
        .json(&serde_json::json!({"streams": ["cam-000", "cam-001", "cam-002"], "policy": "worstfit"}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(start.accepted.len(), 3);
    // worst fit spreads the first two over both devices
    assert_ne!(start.accepted[0].device, start.accepted[1].device);

    let list: Vec<StreamInfo> = http.get(format!("http://{addr}/v1/streams")).send().await.unwrap().json().await.unwrap();
    let running: Vec<_> = list.iter().filter(|s| s.status == "running").map(|s| s.stream.as_str()).collect();
    assert_eq!(running, ["cam-000", "cam-001", "cam-002"]);

    let stop: StopReport = http
        .delete(format!("http://{addr}/v1/streams"))
        .json(&serde_json::json!({"streams": ["cam-001"]}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(stop.stopped, ["cam-001"]);

    let mut saw_placement = 0;
    let deadline = Instant::now() + Duration::from_secs(5);
    while saw_placement < 2 && Instant::now() < deadline {
        let ev = next_json(&mut events, Duration::from_secs(5)).await;
        let s = ev["seq"].as_u64().unwrap();
        assert_eq!(s, seq + 1, "gap in event sequence: {ev}");
        seq = s;
        if ev["type"] == "placement" {
            saw_placement += 1;
        }
    }
    assert_eq!(saw_placement, 2);

    let m: Value = http.get(format!("http://{addr}/v1/scheduler/metrics")).send().await.unwrap().json().await.unwrap();
    assert_eq!(m["policy"], "worstfit");
    assert_eq!(m["current"]["cumulative_fps"], 50);
    assert_eq!(m["placement"].as_array().unwrap().len(), 2);

    let bad = http.get(format!("http://{addr}/v1/flows?from=10&to=5")).send().await.unwrap();
    assert_eq!(bad.status(), 400);
    let unknown = http.get(format!("http://{addr}/v1/history?camera=nope")).send().await.unwrap();
    assert_eq!(unknown.status(), 404);
    let no_forecast = http.get(format!("http://{addr}/v1/forecast")).send().await.unwrap();
    assert_eq!(no_forecast.status(), 503);
    gw.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn nowcast_pushes_an_ingested_second_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let sc = Arc::new(uniform_scenario(4, 1, 200, 600));
    let gw = Gateway::start(sc.clone(), options(&sc, Pacing::Realtime, dir.path(), false)).unwrap();
    let addr = serve(gw.clone()).await;
    let http = reqwest::Client::new();
    let mut nowcast = ws(&addr, "/v1/nowcast?cameras=cam-001").await;
    // let the subscription register before ingesting
    tokio::time::sleep(Duration::from_millis(100)).await;

    let mut worst = Duration::ZERO;
    for w in 0..5u64 {
        let rows: Vec<Value> = (0..15).map(|t| serde_json::json!({"ts_s": w * 15 + t, "counts": [1, 0, 0, 2, 0, 0, 0, t as u32]})).collect();
        let msg = serde_json::json!({"camera_id": "cam-001", "window_start_s": w * 15, "window_len_s": 15, "rows": rows});
        let sent = Instant::now();
        let ack: Value = http.post(format!("http://{addr}/v1/ingest")).json(&msg).send().await.unwrap().json().await.unwrap();
        assert_eq!(ack["records_written"], 15);
        let mut last_seq = 0;
        for t in 0..15 {
            let frame: NowcastMessage = serde_json::from_value(next_json(&mut nowcast, Duration::from_secs(2)).await).unwrap();
            if t == 0 {
                worst = worst.max(sent.elapsed());
            }
            assert!(frame.seq > last_seq);
            last_seq = frame.seq;
            assert_eq!(frame.ts_s, w * 15 + t);
            assert_eq!(frame.per_camera["cam-001"], vec![1, 0, 0, 2, 0, 0, 0, t as u32]);
        }
    }
    assert!(worst < Duration::from_millis(250), "nowcast took {worst:?}");

    let flows: FlowsResponse = http
        .get(format!("http://{addr}/v1/flows?cameras=cam-001&from=0&to=75"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(flows.missing[0].iter().all(|m| !m));
    assert_eq!(flows.counts[0][74][7], 14);
    gw.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fast_replay_feeds_forecasts_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = load_scenario("powercal").unwrap();
    sc.config.intervals.forecast_period_s = 1;
    let sc = Arc::new(sc);
    // four minutes of trace so the two-minute lag window fills
    let mut opts = options(&sc, Pacing::Fast, dir.path(), true);
    opts.duration_s = Some(240.0);
    let gw = Gateway::start(sc.clone(), opts).unwrap();
    let addr = serve(gw.clone()).await;
    let http = reqwest::Client::new();
    let mut fc = ws(&addr, "/v1/forecast/stream").await;

    let start: StartReport = http.post(format!("http://{addr}/v1/streams")).send().await.unwrap().json().await.unwrap();
    assert_eq!(start.accepted.len(), 32);
    tokio::time::timeout(Duration::from_secs(60), gw.wait_idle()).await.unwrap();
    assert_eq!(gw.store.record_count(), 32 * 240);

    let msg: ForecastMessage = serde_json::from_value(next_json(&mut fc, Duration::from_secs(10)).await).unwrap();
    assert!(msg.seq >= 1);
    assert_eq!(msg.forecast.junctions.len(), 32);
    assert_eq!(msg.forecast.horizon_steps, 2);

    let f: Value = http.get(format!("http://{addr}/v1/forecast?horizon=2&step=2&cameras=P03")).send().await.unwrap().json().await.unwrap();
    assert_eq!(f["junctions"], serde_json::json!(["P03"]));
    assert_eq!(f["predictions"][0].as_array().unwrap().len(), 1);

    let h: Value = http.get(format!("http://{addr}/v1/history?camera=s03&minutes=5")).send().await.unwrap().json().await.unwrap();
    let values = h["values"].as_array().unwrap();
    assert_eq!(values.len(), 4);
    assert!(values.iter().all(|v| v.as_f64().unwrap() > 0.0));
    assert_eq!(h["step_s"], 60);
    gw.shutdown().await;
}
