#![allow(dead_code)]

use std::sync::Arc;

use cityfabric::emulator::serve::Pacing;
use cityfabric::forecast::ForecastModel;
use cityfabric::gateway::{pipeline, GatewayOptions};
use cityfabric::scenario::{parse_scenario, resolve, ModelKind, Scenario};

/// `streams` identical 25 FPS cameras spread over a ring of junctions, and
/// `devices` devices of `capacity` FPS each.
pub fn uniform_scenario(streams: usize, devices: usize, capacity: u32, duration_s: u64) -> Scenario {
    let junctions = streams.clamp(2, 20);
    let vertices: Vec<_> = (0..junctions).map(|j| serde_json::json!({"id": format!("J{j:02}"), "camera": true})).collect();
    let edges: Vec<_> = (0..junctions).map(|j| serde_json::json!([format!("J{j:02}"), format!("J{:02}", (j + 1) % junctions)])).collect();
    let text = serde_json::json!({
        "name": "uniform",
        "duration_s": duration_s,
        "profiles": {"flat": {
            "base_rate_per_min": 120,
            "class_mix": [0.37, 0.14, 0.15, 0.10, 0.12, 0.04, 0.05, 0.03],
            "dwell": {"kind": "fixed", "frames": 5}
        }},
        "streams": (0..streams).map(|i| serde_json::json!({
            "id": format!("cam-{i:03}"), "junction": format!("J{:02}", i % junctions), "profile": "flat"
        })).collect::<Vec<_>>(),
        "devices": (0..devices).map(|d| serde_json::json!({
            "id": format!("dev-{d:02}"), "model": "orin", "fps_capacity": capacity, "tops": 200,
            "power_idle_w": 22.4, "power_per_fps_w": 0.2
        })).collect::<Vec<_>>(),
        "road_graph": {"vertices": vertices, "edges": edges},
        "forecast": {"lag_minutes": 2, "horizon_minutes": 2, "train_minutes": 30, "test_minutes": 10}
    })
    .to_string();
    resolve(parse_scenario(&text).unwrap()).unwrap()
}

pub fn options(sc: &Scenario, pacing: Pacing, dir: &std::path::Path, with_model: bool) -> GatewayOptions {
    let f = &sc.config.forecast;
    let history = pipeline::synthetic_series(sc, "history", f.train_minutes as usize);
    let (flows, _) = pipeline::edge_flows(sc, &history).unwrap();
    let thresholds = pipeline::thresholds(sc, &flows).unwrap();
    let model = with_model.then(|| {
        let (m, _) = pipeline::fit_model(sc, ModelKind::HistoricalAverage, &history).unwrap();
        Arc::<dyn ForecastModel>::from(m)
    });
    GatewayOptions { pacing, store_dir: dir.join("store"), model, thresholds, duration_s: None }
}
