//! Pieces shared by the batch runner and the live gateway.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::emulator::first_seen_counts;
use crate::forecast::{
    build_minute_series, ForecastError, ForecastModel, GraphGru, HistoricalAverage, MinuteSeries, SeasonalNaive,
};
use crate::graph::{allocate_edge_flows, calibrate_thresholds, discretize, CongestionState, GraphError, Thresholds};
use crate::model::StreamDescriptor;
use crate::rng;
use crate::scenario::{ModelKind, Scenario};
use crate::store::TimeSeriesStore;

/// Sums per-stream rows into per-junction rows, one per coarse vertex.
pub fn per_vertex<T: Copy + Default + std::ops::AddAssign>(sc: &Scenario, per_stream: &[Vec<T>]) -> Vec<Vec<T>> {
    let len = per_stream.first().map_or(0, Vec::len);
    sc.vertex_streams
        .iter()
        .map(|streams| {
            let mut row = vec![T::default(); len];
            for s in streams {
                for (a, &b) in row.iter_mut().zip(&per_stream[s.index()]) {
                    *a += b;
                }
            }
            row
        })
        .collect()
}

/// Junction minute series read back from the store.
pub fn store_minute_series(
    sc: &Scenario,
    store: &TimeSeriesStore,
    from_s: u64,
    minutes: usize,
) -> Result<MinuteSeries, ForecastError> {
    let cams: Vec<_> = sc.streams.iter().map(|d| d.stream_id).collect();
    let m = build_minute_series(store, &cams, from_s, minutes)?;
    let mut values = Array2::zeros((sc.coarse.len(), minutes));
    let mut missing = Array2::from_elem((sc.coarse.len(), minutes), true);
    for (v, streams) in sc.vertex_streams.iter().enumerate() {
        for s in streams {
            for t in 0..minutes {
                values[[v, t]] += m.values[[s.index(), t]];
                missing[[v, t]] &= m.missing[[s.index(), t]];
            }
        }
    }
    Ok(MinuteSeries { values, missing })
}

/// Junction minute series of an independent synthetic trace of the
/// scenario's streams, e.g. for training history. `label` selects the trace.
pub fn synthetic_series(sc: &Scenario, label: &str, minutes: usize) -> MinuteSeries {
    let salt = rng::label_salt(label);
    let per_stream: Vec<Vec<u64>> = sc
        .streams
        .par_iter()
        .zip(&sc.processes)
        .map(|(d, p)| {
            let desc = StreamDescriptor { trace_seed: rng::derive_seed(d.trace_seed, salt), ..d.clone() };
            first_seen_counts(&desc, p, 60 * minutes as u64, sc.n_classes())
                .into_iter()
                .map(|c| c.iter().map(|&v| v as u64).sum())
                .collect()
        })
        .collect();
    MinuteSeries::from_second_totals(&per_vertex(sc, &per_stream), None)
}

/// `[minute][edge]` flows from junction minute counts, plus the per-minute residue.
pub fn edge_flows(sc: &Scenario, series: &MinuteSeries) -> Result<(Vec<Vec<f64>>, Vec<f64>), GraphError> {
    let mut flows = Vec::with_capacity(series.minutes());
    let mut residue = Vec::with_capacity(series.minutes());
    for t in 0..series.minutes() {
        let counts: Vec<f64> = series.values.column(t).to_vec();
        let a = allocate_edge_flows(&counts, &sc.coarse, sc.config.allocation)?;
        flows.push(a.flows);
        residue.push(a.residue);
    }
    Ok((flows, residue))
}

/// Configured thresholds, or percentiles of the given historical flows.
pub fn thresholds(sc: &Scenario, history_flows: &[Vec<f64>]) -> Result<Thresholds, GraphError> {
    match sc.config.congestion_thresholds {
        Some(t) => Ok(t),
        None => calibrate_thresholds(&history_flows.iter().flatten().copied().collect::<Vec<_>>()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EdgeFlowRow {
    pub minute: usize,
    pub edge: String,
    pub flow: f64,
    pub state: CongestionState,
}

pub fn edge_flow_rows(sc: &Scenario, flows: &[Vec<f64>], th: Thresholds) -> Vec<EdgeFlowRow> {
    flows
        .iter()
        .enumerate()
        .flat_map(|(minute, row)| {
            row.iter().enumerate().map(move |(e, &flow)| EdgeFlowRow {
                minute,
                edge: sc.coarse.edge_name(e),
                flow,
                state: discretize(flow, th),
            })
        })
        .collect()
}

pub fn new_model(sc: &Scenario, kind: ModelKind) -> Box<dyn ForecastModel> {
    match kind {
        ModelKind::HistoricalAverage => Box::new(HistoricalAverage),
        ModelKind::SeasonalNaive => Box::new(SeasonalNaive::default()),
        ModelKind::GraphGruLite => Box::new(GraphGru::new(&sc.coarse, sc.config.forecast.gru.clone())),
    }
}

/// Builds and fits the model on `history`; returns it with its training curve.
pub fn fit_model(
    sc: &Scenario,
    kind: ModelKind,
    history: &MinuteSeries,
) -> Result<(Box<dyn ForecastModel>, Vec<f64>), ForecastError> {
    let f = &sc.config.forecast;
    let mut model = new_model(sc, kind);
    let curve = model.fit(history, f.lag_minutes as usize, f.horizon_minutes as usize)?;
    Ok((model, curve))
}
