//! Road graph, coarsening onto camera-equipped junctions, mass-conserving
//! edge-flow allocation and congestion discretization.

mod allocate;
mod congestion;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

pub use allocate::{allocate_edge_flows, vertex_shares, Allocation, AllocationConfig, EndpointRule, Weighting};
pub use congestion::{calibrate_thresholds, discretize, CongestionState, Thresholds};

use crate::model::{Interner, JunctionId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("duplicate junction id {0}")]
    DuplicateVertex(String),
    #[error("edge references unknown junction {0}")]
    UnknownVertex(String),
    #[error("self-loop at {0}")]
    SelfLoop(String),
    #[error("duplicate edge {0}-{1}")]
    DuplicateEdge(String, String),
    #[error("camera junction {0} cannot reach any other camera junction")]
    IsolatedCameraVertex(String),
    #[error("expected {expected} vertex counts, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("thresholds must satisfy 0 < t1 < t2 (got {t1}, {t2})")]
    Thresholds { t1: f64, t2: f64 },
}

/// File form of a road graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadGraphSpec {
    pub vertices: Vec<VertexSpec>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VertexSpec {
    pub id: String,
    pub camera: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

/// Undirected road network.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    names: Interner,
    camera: Vec<bool>,
    layout: Vec<Option<(f64, f64)>>,
    adj: Vec<Vec<u32>>,
    edges: Vec<(u32, u32)>,
}

impl RoadGraph {
    pub fn from_spec(spec: &RoadGraphSpec) -> Result<Self, GraphError> {
        let mut names = Interner::default();
        let mut camera = Vec::with_capacity(spec.vertices.len());
        let mut layout = Vec::with_capacity(spec.vertices.len());
        for v in &spec.vertices {
            names.insert(&v.id).ok_or_else(|| GraphError::DuplicateVertex(v.id.clone()))?;
            camera.push(v.camera);
            layout.push(v.x.zip(v.y));
        }
        let mut adj = vec![Vec::new(); names.len()];
        let mut edges = Vec::with_capacity(spec.edges.len());
        let mut seen = std::collections::HashSet::new();
        for (a, b) in &spec.edges {
            let u = names.get(a).ok_or_else(|| GraphError::UnknownVertex(a.clone()))?;
            let v = names.get(b).ok_or_else(|| GraphError::UnknownVertex(b.clone()))?;
            if u == v {
                return Err(GraphError::SelfLoop(a.clone()));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(GraphError::DuplicateEdge(a.clone(), b.clone()));
            }
            adj[u as usize].push(v);
            adj[v as usize].push(u);
            edges.push((u, v));
        }
        Ok(Self { names, camera, layout, adj, edges })
    }

    pub fn to_spec(&self) -> RoadGraphSpec {
        RoadGraphSpec {
            vertices: (0..self.len())
                .map(|i| VertexSpec {
                    id: self.names.name(i as u32).to_string(),
                    camera: self.camera[i],
                    x: self.layout[i].map(|p| p.0),
                    y: self.layout[i].map(|p| p.1),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|&(u, v)| (self.names.name(u).to_string(), self.names.name(v).to_string()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.camera.len()
    }

    pub fn is_empty(&self) -> bool {
        self.camera.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn lookup(&self, name: &str) -> Option<JunctionId> {
        self.names.get(name).map(JunctionId)
    }

    pub fn name(&self, v: JunctionId) -> &str {
        self.names.name(v.0)
    }

    pub fn has_camera(&self, v: JunctionId) -> bool {
        self.camera[v.index()]
    }

    pub fn layout(&self, v: JunctionId) -> Option<(f64, f64)> {
        self.layout[v.index()]
    }

    pub fn neighbors(&self, v: JunctionId) -> impl Iterator<Item = JunctionId> + '_ {
        self.adj[v.index()].iter().map(|&n| JunctionId(n))
    }

    pub fn camera_vertices(&self) -> impl Iterator<Item = JunctionId> + '_ {
        (0..self.len() as u32).map(JunctionId).filter(|v| self.camera[v.index()])
    }

    /// Connected component label per vertex.
    fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.len()];
        let mut next = 0;
        for s in 0..self.len() {
            if comp[s] != usize::MAX {
                continue;
            }
            comp[s] = next;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &n in &self.adj[u] {
                    if comp[n as usize] == usize::MAX {
                        comp[n as usize] = next;
                        q.push_back(n as usize);
                    }
                }
            }
            next += 1;
        }
        comp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperEdge {
    /// Coarse vertex indices with `u < v`.
    pub u: usize,
    pub v: usize,
    /// Number of distinct collapsed segment paths between the endpoints.
    pub weight: u32,
    /// Segments on the shortest collapsed path.
    pub hop_length: u32,
}

/// Graph over camera-equipped junctions only.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseGraph {
    junctions: Vec<JunctionId>,
    names: Vec<String>,
    layout: Vec<Option<(f64, f64)>>,
    edges: Vec<SuperEdge>,
    incident: Vec<Vec<usize>>,
}

impl CoarseGraph {
    fn new(
        junctions: Vec<JunctionId>,
        names: Vec<String>,
        layout: Vec<Option<(f64, f64)>>,
        edges: Vec<SuperEdge>,
    ) -> Self {
        let mut incident = vec![Vec::new(); junctions.len()];
        for (i, e) in edges.iter().enumerate() {
            incident[e.u].push(i);
            incident[e.v].push(i);
        }
        Self { junctions, names, layout, edges, incident }
    }

    pub fn len(&self) -> usize {
        self.junctions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.junctions.is_empty()
    }

    pub fn edges(&self) -> &[SuperEdge] {
        &self.edges
    }

    pub fn incident(&self, v: usize) -> &[usize] {
        &self.incident[v]
    }

    /// Road-graph junction of coarse vertex `v`.
    pub fn junction(&self, v: usize) -> JunctionId {
        self.junctions[v]
    }

    pub fn name(&self, v: usize) -> &str {
        &self.names[v]
    }

    pub fn index_of(&self, j: JunctionId) -> Option<usize> {
        self.junctions.binary_search(&j).ok()
    }

    pub fn index_by_name(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Stable segment identifier, `"<u>~<v>"` with endpoint names.
    pub fn edge_name(&self, e: usize) -> String {
        let se = &self.edges[e];
        format!("{}~{}", self.names[se.u], self.names[se.v])
    }

    pub fn edge_by_name(&self, name: &str) -> Option<usize> {
        (0..self.edges.len()).find(|&e| self.edge_name(e) == name)
    }

    /// Neighbor lists with super-edge weights.
    pub fn weighted_neighbors(&self, v: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.incident[v].iter().map(move |&e| {
            let se = &self.edges[e];
            (if se.u == v { se.v } else { se.u }, se.weight)
        })
    }

    /// Expands every super-edge back into camera-less segment chains: one of
    /// `hop_length` segments and `weight - 1` more of `hop_length + 1`
    /// segments. Coarsening the result gives back this graph.
    pub fn to_road_graph(&self) -> RoadGraphSpec {
        let mut vertices: Vec<VertexSpec> = (0..self.len())
            .map(|i| VertexSpec {
                id: self.names[i].clone(),
                camera: true,
                x: self.layout[i].map(|p| p.0),
                y: self.layout[i].map(|p| p.1),
            })
            .collect();
        let mut edges = Vec::new();
        for se in &self.edges {
            let (a, b) = (&self.names[se.u], &self.names[se.v]);
            for k in 0..se.weight {
                let hops = if k == 0 { se.hop_length } else { se.hop_length + 1 };
                let mut prev = a.clone();
                for i in 1..hops {
                    let id = format!("~{a}~{b}~{k}~{i}");
                    vertices.push(VertexSpec { id: id.clone(), camera: false, x: None, y: None });
                    edges.push((prev, id.clone()));
                    prev = id;
                }
                edges.push((prev, b.clone()));
            }
        }
        // Junctions without super-edges hang off a branching hub so they stay
        // reachable; paths through the hub never collapse.
        let lonely: Vec<usize> = (0..self.len()).filter(|&v| self.incident[v].is_empty()).collect();
        if !lonely.is_empty() {
            let hub = "~hub".to_string();
            vertices.push(VertexSpec { id: hub.clone(), camera: false, x: None, y: None });
            vertices.push(VertexSpec { id: "~hub~stub".into(), camera: false, x: None, y: None });
            edges.push((hub.clone(), "~hub~stub".into()));
            for &v in &lonely {
                edges.push((hub.clone(), self.names[v].clone()));
            }
            if let Some(anchor) = (0..self.len()).find(|v| !self.incident[*v].is_empty()) {
                edges.push((hub, self.names[anchor].clone()));
            }
        }
        RoadGraphSpec { vertices, edges }
    }

    /// JSON view for the dashboard overlay.
    pub fn export(&self) -> CoarseGraphExport {
        CoarseGraphExport {
            vertices: (0..self.len())
                .map(|i| ExportVertex {
                    id: self.names[i].clone(),
                    x: self.layout[i].map(|p| p.0),
                    y: self.layout[i].map(|p| p.1),
                })
                .collect(),
            super_edges: self
                .edges
                .iter()
                .enumerate()
                .map(|(i, se)| ExportEdge {
                    id: self.edge_name(i),
                    u: self.names[se.u].clone(),
                    v: self.names[se.v].clone(),
                    weight: se.weight,
                    hop_length: se.hop_length,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseGraphExport {
    pub vertices: Vec<ExportVertex>,
    pub super_edges: Vec<ExportEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportVertex {
    pub id: String,
    pub x: Option<f64>,
    pub y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportEdge {
    pub id: String,
    pub u: String,
    pub v: String,
    pub weight: u32,
    pub hop_length: u32,
}

/// Collapses camera-less segment chains into super-edges.
///
/// From each camera junction, every incident segment is followed through
/// camera-less junctions of degree two. A walk reaching another camera
/// junction yields one collapsed path; a walk that hits a dead end or a
/// camera-less junction of degree three or more contributes nothing, and
/// walks returning to their start are discarded. Parallel paths between the
/// same pair merge into one super-edge whose weight counts them and whose
/// hop length is the shortest.
pub fn coarsen(g: &RoadGraph) -> Result<CoarseGraph, GraphError> {
    let comp = g.components();
    let mut cams_per_comp: BTreeMap<usize, Vec<JunctionId>> = BTreeMap::new();
    for v in g.camera_vertices() {
        cams_per_comp.entry(comp[v.index()]).or_default().push(v);
    }
    for cams in cams_per_comp.values() {
        if cams.len() == 1 {
            return Err(GraphError::IsolatedCameraVertex(g.name(cams[0]).to_string()));
        }
    }

    let junctions: Vec<JunctionId> = g.camera_vertices().collect();
    let coarse_of = |j: JunctionId| junctions.binary_search(&j).ok();
    let mut merged: BTreeMap<(usize, usize), (u32, u32)> = BTreeMap::new();
    for (ui, &u) in junctions.iter().enumerate() {
        for first in g.neighbors(u) {
            let mut prev = u;
            let mut cur = first;
            let mut hops = 1u32;
            let end = loop {
                if g.has_camera(cur) {
                    break Some(cur);
                }
                if g.adj[cur.index()].len() != 2 || hops as usize > g.len() {
                    break None;
                }
                let next = g.neighbors(cur).find(|&n| n != prev).expect("degree two");
                prev = cur;
                cur = next;
                hops += 1;
            };
            let Some(v) = end else { continue };
            let vi = coarse_of(v).expect("camera vertex");
            // each path is found once from each end; keep the walk from the lower index
            if vi <= ui {
                continue;
            }
            let entry = merged.entry((ui, vi)).or_insert((0, u32::MAX));
            entry.0 += 1;
            entry.1 = entry.1.min(hops);
        }
    }
    let edges = merged
        .into_iter()
        .map(|((u, v), (weight, hop_length))| SuperEdge { u, v, weight, hop_length })
        .collect();
    let names = junctions.iter().map(|&j| g.name(j).to_string()).collect();
    let layout = junctions.iter().map(|&j| g.layout(j)).collect();
    Ok(CoarseGraph::new(junctions, names, layout, edges))
}
