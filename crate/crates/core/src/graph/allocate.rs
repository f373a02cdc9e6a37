use serde::{Deserialize, Serialize};

use super::{CoarseGraph, GraphError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Share proportional to super-edge multiplicity `w_e`.
    #[default]
    Multiplicity,
    /// Share proportional to `1 / hop_length`.
    InverseLength,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointRule {
    /// `f_e = s(u,e) + s(v,e)`; conserves mass.
    #[default]
    Sum,
    /// Average of the two endpoint shares; does not conserve mass.
    Mean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationConfig {
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub endpoint: EndpointRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Flow per super-edge, indexed like `CoarseGraph::edges`.
    pub flows: Vec<f64>,
    /// Count held back at dangling vertices.
    pub residue: f64,
    /// Coarse vertices with a positive count and no incident super-edge.
    pub dangling: Vec<usize>,
}

fn edge_weight(cg: &CoarseGraph, e: usize, w: Weighting) -> f64 {
    let se = &cg.edges()[e];
    match w {
        Weighting::Multiplicity => se.weight as f64,
        Weighting::InverseLength => 1.0 / se.hop_length as f64,
    }
}

/// Shares of `count` at vertex `v` over its incident super-edges, as
/// `(edge, share)`. The last share is the remainder so the shares add up to
/// `count`.
pub fn vertex_shares(cg: &CoarseGraph, v: usize, count: f64, weighting: Weighting) -> Vec<(usize, f64)> {
    let inc = cg.incident(v);
    let total: f64 = inc.iter().map(|&e| edge_weight(cg, e, weighting)).sum();
    let mut out = Vec::with_capacity(inc.len());
    let mut given = 0.0;
    for (i, &e) in inc.iter().enumerate() {
        let s = if i + 1 == inc.len() {
            (count - given).max(0.0)
        } else {
            count * edge_weight(cg, e, weighting) / total
        };
        given += s;
        out.push((e, s));
    }
    out
}

pub fn allocate_edge_flows(counts: &[f64], cg: &CoarseGraph, cfg: AllocationConfig) -> Result<Allocation, GraphError> {
    if counts.len() != cg.len() {
        return Err(GraphError::ShapeMismatch { expected: cg.len(), got: counts.len() });
    }
    let mut flows = vec![0.0; cg.edges().len()];
    let mut residue = 0.0;
    let mut dangling = Vec::new();
    for (v, &c) in counts.iter().enumerate() {
        if cg.incident(v).is_empty() {
            if c > 0.0 {
                residue += c;
                dangling.push(v);
            }
            continue;
        }
        for (e, s) in vertex_shares(cg, v, c, cfg.weighting) {
            flows[e] += s;
        }
    }
    if cfg.endpoint == EndpointRule::Mean {
        flows.iter_mut().for_each(|f| *f /= 2.0);
    }
    Ok(Allocation { flows, residue, dangling })
}

#[cfg(test)]
mod tests {
    use super::super::{coarsen, tests::random_road_graph, RoadGraph, RoadGraphSpec, VertexSpec};
    use super::*;
    use proptest::prelude::*;

    fn triangle_plus_parallel() -> CoarseGraph {
        // A-B once, A-C twice (via x and y), plus an isolated pair D-E
        let vs = [("A", true), ("B", true), ("C", true), ("x", false), ("y", false), ("D", true), ("E", true)];
        let es = [("A", "B"), ("A", "x"), ("x", "C"), ("A", "y"), ("y", "C"), ("D", "E")];
        let spec = RoadGraphSpec {
            vertices: vs.iter().map(|(i, c)| VertexSpec { id: i.to_string(), camera: *c, x: None, y: None }).collect(),
            edges: es.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        };
        coarsen(&RoadGraph::from_spec(&spec).unwrap()).unwrap()
    }

    #[test]
    fn proportional_shares() {
        let cg = triangle_plus_parallel();
        let a = cg.index_by_name("A").unwrap();
        let shares = vertex_shares(&cg, a, 12.0, Weighting::Multiplicity);
        let ab = cg.edge_by_name("A~B").unwrap();
        let ac = cg.edge_by_name("A~C").unwrap();
        let get = |e| shares.iter().find(|s| s.0 == e).unwrap().1;
        assert_eq!(get(ab), 4.0);
        assert_eq!(get(ac), 8.0);
    }

    #[test]
    fn single_edge_gets_full_count() {
        let cg = triangle_plus_parallel();
        let b = cg.index_by_name("B").unwrap();
        let mut counts = vec![0.0; cg.len()];
        counts[b] = 10.0;
        let a = allocate_edge_flows(&counts, &cg, AllocationConfig::default()).unwrap();
        assert_eq!(a.flows[cg.edge_by_name("A~B").unwrap()], 10.0);
        assert_eq!(a.flows.iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn zeros_and_shape() {
        let cg = triangle_plus_parallel();
        let a = allocate_edge_flows(&vec![0.0; cg.len()], &cg, AllocationConfig::default()).unwrap();
        assert!(a.flows.iter().all(|&f| f == 0.0));
        assert_eq!(a.residue, 0.0);
        assert!(a.dangling.is_empty());
        assert_eq!(
            allocate_edge_flows(&[1.0], &cg, AllocationConfig::default()),
            Err(GraphError::ShapeMismatch { expected: cg.len(), got: 1 })
        );
    }

    #[test]
    fn mean_rule_halves() {
        let cg = triangle_plus_parallel();
        let counts = vec![3.0; cg.len()];
        let sum = allocate_edge_flows(&counts, &cg, AllocationConfig::default()).unwrap();
        let mean =
            allocate_edge_flows(&counts, &cg, AllocationConfig { endpoint: EndpointRule::Mean, ..Default::default() })
                .unwrap();
        for (s, m) in sum.flows.iter().zip(&mean.flows) {
            assert_eq!(*s, 2.0 * m);
        }
    }

    proptest! {
        #[test]
        fn mass_is_conserved(
            spec in random_road_graph(),
            raw in proptest::collection::vec(0.0f64..1e6, 30),
            inverse in any::<bool>(),
        ) {
            let cg = coarsen(&RoadGraph::from_spec(&spec).unwrap()).unwrap();
            let counts: Vec<f64> = raw[..cg.len()].to_vec();
            let weighting = if inverse { Weighting::InverseLength } else { Weighting::Multiplicity };
            let a = allocate_edge_flows(&counts, &cg, AllocationConfig { weighting, ..Default::default() }).unwrap();
            let total: f64 = counts.iter().sum();
            let got: f64 = a.flows.iter().sum::<f64>() + a.residue;
            prop_assert!((got - total).abs() <= 1e-9 * total.max(1.0));
            for v in 0..cg.len() {
                if cg.incident(v).is_empty() {
                    continue;
                }
                let shares = vertex_shares(&cg, v, counts[v], weighting);
                prop_assert!(shares.iter().all(|s| s.1 >= 0.0));
                let s: f64 = shares.iter().map(|s| s.1).sum();
                prop_assert!((s - counts[v]).abs() <= 1e-12 * counts[v].max(1.0));
            }
            for &d in &a.dangling {
                prop_assert!(cg.incident(d).is_empty() && counts[d] > 0.0);
            }
        }
    }
}
