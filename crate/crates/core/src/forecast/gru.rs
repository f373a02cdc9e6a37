//! GraphGRU-lite: one graph-weighted GRU layer (hidden size 32 by default)
//! encoding the lag window, and a linear head emitting every horizon step at
//! once from the final state.
//!
//! Per node and step, with `Â` the adjacency row-normalized by super-edge
//! weight and `a = [x, Âx]`:
//!
//! ```text
//! z  = σ(a Wz + h Uz + (Âh) Vz + bz)
//! r  = σ(a Wr + h Ur + (Âh) Vr + br)
//! c  = tanh(a Wc + (r∘h) Uc + (Â(r∘h)) Vc)
//! h' = (1 - z)∘h + z∘c
//! y  = h_L Wo
//! ```
//!
//! The candidate and the head carry no bias, so an all-zero input yields an
//! all-zero forecast.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{shape_err, ForecastError, ForecastModel, MinuteSeries};
use crate::graph::CoarseGraph;
use crate::rng;

const WZ: usize = 0;
const WR: usize = 1;
const WC: usize = 2;
const UZ: usize = 3;
const UR: usize = 4;
const UC: usize = 5;
const VZ: usize = 6;
const VR: usize = 7;
const VC: usize = 8;
const BZ: usize = 9;
const BR: usize = 10;
const WO: usize = 11;
const N_TENSORS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GruConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> usize {
    32
}
fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.01
}
fn default_clip() -> f64 {
    5.0
}

impl Default for GruConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            clip_norm: default_clip(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphGru {
    cfg: GruConfig,
    adj: Array2<f64>,
    adj_t: Array2<f64>,
    params: Vec<Array2<f64>>,
    lag: usize,
    horizon: usize,
    scale: f64,
}

/// Forward activations of one recurrent step, kept for backprop.
struct Step {
    a: Array2<f64>,
    h: Array2<f64>,
    ah: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    rh: Array2<f64>,
    arh: Array2<f64>,
    c: Array2<f64>,
}

/// Inputs and targets for a batch of origins, node-major: row `j * b + k`
/// is junction `j` of origin `k`.
struct Batch {
    b: usize,
    xs: Vec<Array2<f64>>,
    target: Array2<f64>,
    mask: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_id: String,
    shapes: Vec<(usize, usize)>,
    seed: u64,
    scale: f64,
    lag: usize,
    horizon: usize,
    hidden: usize,
    n_junctions: usize,
}

impl GraphGru {
    pub fn new(cg: &CoarseGraph, cfg: GruConfig) -> Self {
        let n = cg.len();
        let mut adj = Array2::zeros((n, n));
        for v in 0..n {
            for (u, w) in cg.weighted_neighbors(v) {
                adj[[v, u]] += w as f64;
            }
        }
        Self::from_adjacency(adj, cfg)
    }

    /// `adj` holds raw symmetric weights; rows are normalized here.
    pub fn from_adjacency(mut adj: Array2<f64>, cfg: GruConfig) -> Self {
        for mut row in adj.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        let adj_t = adj.t().to_owned();
        Self { cfg, adj, adj_t, params: Vec::new(), lag: 0, horizon: 0, scale: 1.0 }
    }

    pub fn junctions(&self) -> usize {
        self.adj.nrows()
    }

    pub fn config(&self) -> &GruConfig {
        &self.cfg
    }

    pub fn is_fitted(&self) -> bool {
        !self.params.is_empty()
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(&mut self, lag: usize, horizon: usize, scale: f64) {
        let h = self.cfg.hidden;
        let mut rng = rng::rng_for(self.cfg.seed, rng::label_salt("gru-init"));
        let shapes = Self::shapes(h, horizon);
        self.params = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                if i == BZ || i == BR {
                    return Array2::zeros((r, c));
                }
                let lim = (6.0 / (r + c) as f64).sqrt();
                Array2::from_shape_simple_fn((r, c), || rng.gen_range(-lim..lim))
            })
            .collect();
        self.lag = lag;
        self.horizon = horizon;
        self.scale = if scale > 0.0 { scale } else { 1.0 };
    }

    fn shapes(h: usize, k: usize) -> Vec<(usize, usize)> {
        let mut v = vec![(2, h); 3];
        v.extend([(h, h); 6]);
        v.extend([(1, h); 2]);
        v.push((h, k));
        debug_assert_eq!(v.len(), N_TENSORS);
        v
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for p in &mut self.params {
            p.iter_mut().for_each(|x| *x = *it.next().expect("parameter vector too short"));
        }
        assert!(it.next().is_none(), "parameter vector too long");
    }

    /// Applies `Â` (or `Âᵀ`) to every origin of a node-major batch.
    fn gconv(adj: &Array2<f64>, m: &Array2<f64>, n: usize, b: usize) -> Array2<f64> {
        let f = m.ncols();
        let m = m.as_standard_layout();
        let view = m.view().into_shape_with_order((n, b * f)).expect("standard layout");
        adj.dot(&view).into_shape_with_order((n * b, f)).expect("standard layout")
    }

    fn step(&self, x: &Array2<f64>, h: &Array2<f64>, n: usize, b: usize) -> (Step, Array2<f64>) {
        let p = &self.params;
        let ax = Self::gconv(&self.adj, x, n, b);
        let a = concatenate![Axis(1), x.view(), ax.view()];
        let ah = Self::gconv(&self.adj, h, n, b);
        let z = (a.dot(&p[WZ]) + h.dot(&p[UZ]) + ah.dot(&p[VZ]) + &p[BZ]).mapv_into(sigmoid);
        let r = (a.dot(&p[WR]) + h.dot(&p[UR]) + ah.dot(&p[VR]) + &p[BR]).mapv_into(sigmoid);
        let rh = &r * h;
        let arh = Self::gconv(&self.adj, &rh, n, b);
        let c = (a.dot(&p[WC]) + rh.dot(&p[UC]) + arh.dot(&p[VC])).mapv_into(f64::tanh);
        let h_next = (1.0 - &z) * h + &z * &c;
        (Step { a, h: h.clone(), ah, z, r, rh, arh, c }, h_next)
    }

    fn encode(&self, xs: &[Array2<f64>], n: usize, b: usize) -> (Vec<Step>, Array2<f64>) {
        let mut h = Array2::zeros((n * b, self.cfg.hidden));
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let (st, next) = self.step(x, &h, n, b);
            steps.push(st);
            h = next;
        }
        (steps, h)
    }

    /// Masked mean squared error (scaled units) and its gradient per tensor.
    fn loss_grad(&self, batch: &Batch) -> (f64, Vec<Array2<f64>>) {
        let n = self.junctions();
        let b = batch.b;
        let p = &self.params;
        let (steps, h_last) = self.encode(&batch.xs, n, b);
        let y = h_last.dot(&p[WO]);
        let count = batch.mask.sum().max(1.0);
        let diff = (&y - &batch.target) * &batch.mask;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;

        let mut g: Vec<Array2<f64>> = p.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        let dy = diff * (2.0 / count);
        g[WO] = h_last.t().dot(&dy);
        let mut dh = dy.dot(&p[WO].t());
        for st in steps.iter().rev() {
            let dz = &dh * &(&st.c - &st.h);
            let dc = &dh * &st.z;
            let mut dh_prev = &dh * &(1.0 - &st.z);

            let dc_pre = dc * &st.c.mapv(|c| 1.0 - c * c);
            g[WC] += &st.a.t().dot(&dc_pre);
            g[UC] += &st.rh.t().dot(&dc_pre);
            g[VC] += &st.arh.t().dot(&dc_pre);
            let drh = dc_pre.dot(&p[UC].t()) + Self::gconv(&self.adj_t, &dc_pre.dot(&p[VC].t()), n, b);
            let dr = &drh * &st.h;
            dh_prev += &(&drh * &st.r);

            let dz_pre = dz * &st.z.mapv(|z| z * (1.0 - z));
            let dr_pre = dr * &st.r.mapv(|r| r * (1.0 - r));
            g[WZ] += &st.a.t().dot(&dz_pre);
            g[UZ] += &st.h.t().dot(&dz_pre);
            g[VZ] += &st.ah.t().dot(&dz_pre);
            g[BZ] += &dz_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
            g[WR] += &st.a.t().dot(&dr_pre);
            g[UR] += &st.h.t().dot(&dr_pre);
            g[VR] += &st.ah.t().dot(&dr_pre);
            g[BR] += &dr_pre.sum_axis(Axis(0)).insert_axis(Axis(0));

            dh_prev += &dz_pre.dot(&p[UZ].t());
            dh_prev += &dr_pre.dot(&p[UR].t());
            let via_graph = dz_pre.dot(&p[VZ].t()) + dr_pre.dot(&p[VR].t());
            dh_prev += &Self::gconv(&self.adj_t, &via_graph, n, b);
            dh = dh_prev;
        }
        (loss, g)
    }

    fn make_batch(&self, series: &MinuteSeries, origins: &[usize]) -> Batch {
        let n = self.junctions();
        let b = origins.len();
        let (lag, k) = (self.lag, self.horizon);
        let xs = (0..lag)
            .map(|t| {
                Array2::from_shape_fn((n * b, 1), |(row, _)| {
                    let (j, o) = (row / b, origins[row % b]);
                    series.values[[j, o - lag + t]] / self.scale
                })
            })
            .collect();
        let target = Array2::from_shape_fn((n * b, k), |(row, h)| {
            let (j, o) = (row / b, origins[row % b]);
            series.values[[j, o + h]] / self.scale
        });
        let mask = Array2::from_shape_fn((n * b, k), |(row, h)| {
            let (j, o) = (row / b, origins[row % b]);
            if series.missing[[j, o + h]] {
                0.0
            } else {
                1.0
            }
        });
        Batch { b, xs, target, mask }
    }

    fn origins(&self, series: &MinuteSeries) -> Vec<usize> {
        (self.lag..=series.minutes() - self.horizon).collect()
    }

    /// Training loss over every origin of `series` and its gradient, flattened
    /// like [`params_flat`](Self::params_flat). Requires an initialized model.
    pub fn loss_and_grad(&self, series: &MinuteSeries) -> (f64, Vec<f64>) {
        let batch = self.make_batch(series, &self.origins(series));
        let (loss, g) = self.loss_grad(&batch);
        (loss, g.iter().flat_map(|t| t.iter().copied()).collect())
    }

    fn check_series(&self, series: &MinuteSeries, lag: usize, horizon: usize) -> Result<(), ForecastError> {
        if series.junctions() != self.junctions() {
            return Err(shape_err(self.junctions(), series.junctions()));
        }
        if series.minutes() < lag + horizon {
            return Err(ForecastError::TooShort { minutes: series.minutes(), needed: lag + horizon });
        }
        Ok(())
    }

    fn train_rmse(&self, series: &MinuteSeries) -> f64 {
        let origins = self.origins(series);
        let (mut sq, mut n) = (0.0, 0.0);
        for chunk in origins.chunks(256) {
            let batch = self.make_batch(series, chunk);
            let (_, h) = self.encode(&batch.xs, self.junctions(), batch.b);
            let y = h.dot(&self.params[WO]).mapv(|v| v.max(0.0));
            let d = (y - &batch.target) * &batch.mask;
            sq += d.iter().map(|v| v * v).sum::<f64>();
            n += batch.mask.sum();
        }
        (sq / n.max(1.0)).sqrt() * self.scale
    }

    pub fn save(&self, path: &Path) -> Result<(), ForecastError> {
        if !self.is_fitted() {
            return Err(ForecastError::NotFitted);
        }
        let header = CheckpointHeader {
            model_id: self.model_id().into(),
            shapes: self.params.iter().map(|p| (p.nrows(), p.ncols())).collect(),
            seed: self.cfg.seed,
            scale: self.scale,
            lag: self.lag,
            horizon: self.horizon,
            hidden: self.cfg.hidden,
            n_junctions: self.junctions(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, &header).map_err(|e| ForecastError::Checkpoint(e.to_string()))?;
        f.write_all(b"\n")?;
        for v in self.params_flat() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Loads parameters saved by [`save`](Self::save) into a model built on
    /// the same graph.
    pub fn load(&mut self, path: &Path) -> Result<(), ForecastError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(&line).map_err(|e| ForecastError::Checkpoint(e.to_string()))?;
        if header.n_junctions != self.junctions() {
            return Err(shape_err(self.junctions(), header.n_junctions));
        }
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut r, &mut bytes)?;
        let expected: usize = header.shapes.iter().map(|(a, b)| a * b).sum();
        if bytes.len() != expected * 8 || header.shapes != Self::shapes(header.hidden, header.horizon) {
            return Err(ForecastError::Checkpoint("parameter block does not match header".into()));
        }
        self.cfg.hidden = header.hidden;
        self.cfg.seed = header.seed;
        self.init(header.lag, header.horizon, header.scale);
        let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        self.set_params_flat(&flat);
        Ok(())
    }
}

impl ForecastModel for GraphGru {
    fn model_id(&self) -> &str {
        "graph_gru_lite"
    }

    fn fit(&mut self, train: &MinuteSeries, lag: usize, horizon: usize) -> Result<Vec<f64>, ForecastError> {
        self.check_series(train, lag, horizon)?;
        self.init(lag, horizon, train.observed_mean());
        let mut origins = self.origins(train);
        let mut shuffle = rng::rng_for(self.cfg.seed, rng::label_salt("gru-shuffle"));
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut m: Vec<Array2<f64>> = self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        let mut v = m.clone();
        let mut t = 0i32;
        let mut curve = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            origins.shuffle(&mut shuffle);
            for chunk in origins.chunks(self.cfg.batch_size.max(1)) {
                let batch = self.make_batch(train, chunk);
                let (loss, mut g) = self.loss_grad(&batch);
                if !loss.is_finite() {
                    return Err(ForecastError::DivergenceDetected {
                        seed: self.cfg.seed,
                        epoch,
                        config: serde_json::to_string(&self.cfg).unwrap_or_default(),
                    });
                }
                let norm = g.iter().map(|t| t.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > self.cfg.clip_norm {
                    let k = self.cfg.clip_norm / norm;
                    g.iter_mut().for_each(|t| *t *= k);
                }
                t += 1;
                let (c1, c2) = (1.0 - f64::powi(b1, t), 1.0 - f64::powi(b2, t));
                for i in 0..N_TENSORS {
                    m[i] = &m[i] * b1 + &g[i] * (1.0 - b1);
                    v[i] = &v[i] * b2 + &g[i].mapv(|x| x * x) * (1.0 - b2);
                    let step = ndarray::Zip::from(&m[i])
                        .and(&v[i])
                        .map_collect(|&mi, &vi| self.cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + eps));
                    self.params[i] -= &step;
                }
            }
            let rmse = self.train_rmse(train);
            if !rmse.is_finite() {
                return Err(ForecastError::DivergenceDetected {
                    seed: self.cfg.seed,
                    epoch,
                    config: serde_json::to_string(&self.cfg).unwrap_or_default(),
                });
            }
            curve.push(rmse);
        }
        Ok(curve)
    }

    fn predict(&self, lag: ArrayView2<f64>, horizon_steps: usize) -> Result<Array2<f64>, ForecastError> {
        if !self.is_fitted() {
            return Err(ForecastError::NotFitted);
        }
        let n = self.junctions();
        if lag.nrows() != n || lag.ncols() != self.lag {
            return Err(shape_err((n, self.lag), lag.shape()));
        }
        if horizon_steps > self.horizon {
            return Err(shape_err(format!("horizon <= {}", self.horizon), horizon_steps));
        }
        let xs: Vec<Array2<f64>> =
            (0..self.lag).map(|t| lag.slice(s![.., t..t + 1]).mapv(|x| x / self.scale)).collect();
        let (_, h) = self.encode(&xs, n, 1);
        let y = h.dot(&self.params[WO].slice(s![.., ..horizon_steps]));
        Ok(y.mapv(|v| (v * self.scale).max(0.0)))
    }
}
