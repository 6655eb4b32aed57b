//! Motion graphs: per-snippet, per-scale graphs whose nodes are regions and
//! whose edges connect adjacent regions, carrying the consistency measures
//! as features, plus the normalized adjacency structures the network
//! propagates over.

use ndarray::Array2;

use crate::consistency::{snippet_features, ConsistencyParams, ConsistencySnapshot, SnippetWindow};
use crate::error::Result;
use crate::grid::ScaleSpec;

/// One snippet's graph at one scale. Node features are
/// `[spatial-inner, temporal-inner]`; edge features are
/// `[spatial-inter, temporal-inter]`, kept both raw and mapped to [0,1]
/// (the mapped values feed adjacency weighting and reconstruction targets).
#[derive(Clone, Debug)]
pub struct MotionGraph {
    pub spec: ScaleSpec,
    pub end_frame: usize,
    /// nodes x 2, row-major over regions.
    pub node_features: Array2<f64>,
    /// Undirected, canonical order, i < j, no duplicates.
    pub edges: Vec<(usize, usize)>,
    /// edges x 2, signed/raw values.
    pub edge_raw: Array2<f64>,
    /// edges x 2, mapped to [0,1] per channel.
    pub edge_mapped: Array2<f64>,
    /// Direction class count the temporal channel was normalized by.
    pub classes: usize,
}

impl MotionGraph {
    pub fn node_count(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// Which edge-feature channel drives an adjacency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeChannel {
    Spatial,
    Temporal,
}

/// Maps raw edge features onto [0,1]^2: the spatial channel affinely from
/// [-1,1], the temporal channel by its analytic maximum ln(classes). Clamped
/// against rounding spill.
pub fn map_edge_weights(raw: [f64; 2], classes: usize) -> [f64; 2] {
    let spatial = ((raw[0] + 1.0) / 2.0).clamp(0.0, 1.0);
    let temporal = (raw[1] / (classes as f64).ln()).clamp(0.0, 1.0);
    [spatial, temporal]
}

/// Attaches mapped edge targets to a snapshot's features.
pub fn build_graph(snapshot: &ConsistencySnapshot, classes: usize) -> MotionGraph {
    let n = snapshot.node_spatial.len();
    let e = snapshot.edges.len();
    let mut node_features = Array2::zeros((n, 2));
    for i in 0..n {
        node_features[[i, 0]] = snapshot.node_spatial[i];
        node_features[[i, 1]] = snapshot.node_temporal[i];
    }
    let mut edge_raw = Array2::zeros((e, 2));
    let mut edge_mapped = Array2::zeros((e, 2));
    for k in 0..e {
        let raw = [snapshot.edge_spatial[k], snapshot.edge_temporal[k]];
        let mapped = map_edge_weights(raw, classes);
        edge_raw[[k, 0]] = raw[0];
        edge_raw[[k, 1]] = raw[1];
        edge_mapped[[k, 0]] = mapped[0];
        edge_mapped[[k, 1]] = mapped[1];
    }
    MotionGraph {
        spec: snapshot.spec.clone(),
        end_frame: snapshot.end_frame,
        node_features,
        edges: snapshot.edges.clone(),
        edge_raw,
        edge_mapped,
        classes,
    }
}

/// The graphs of one snippet across every configured scale.
#[derive(Clone, Debug)]
pub struct MultiScaleGraphSet {
    pub end_frame: usize,
    pub graphs: Vec<MotionGraph>,
}

/// Builds one [`MotionGraph`] per scale spec from the same snippet window.
pub fn build_msmc(
    window: &SnippetWindow,
    specs: &[ScaleSpec],
    params: &ConsistencyParams,
) -> Result<MultiScaleGraphSet> {
    let graphs = specs
        .iter()
        .map(|spec| Ok(build_graph(&snippet_features(window, spec, params)?, params.classes)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiScaleGraphSet {
        end_frame: window.end_frame,
        graphs,
    })
}

/// Symmetric normalized adjacency with self-loops,
/// `D^{-1/2} (A + I) D^{-1/2}`, stored as CSR. Symmetric, entries in [0,1],
/// strictly positive diagonal, spectral radius <= 1.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Builds the normalized adjacency over one mapped edge channel.
pub fn normalized_adjacency(graph: &MotionGraph, channel: EdgeChannel) -> NormalizedAdjacency {
    let n = graph.node_count();
    let ch = match channel {
        EdgeChannel::Spatial => 0,
        EdgeChannel::Temporal => 1,
    };
    let mut degree = vec![1.0f64; n];
    for (k, &(i, j)) in graph.edges.iter().enumerate() {
        let w = graph.edge_mapped[[k, ch]];
        degree[i] += w;
        degree[j] += w;
    }
    let mut neighbors: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 1.0)]).collect();
    for (k, &(i, j)) in graph.edges.iter().enumerate() {
        let w = graph.edge_mapped[[k, ch]];
        neighbors[i].push((j, w));
        neighbors[j].push((i, w));
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for (i, mut row) in neighbors.into_iter().enumerate() {
        row.sort_by_key(|&(j, _)| j);
        for (j, w) in row {
            cols.push(j);
            vals.push(w / (degree[i] * degree[j]).sqrt());
        }
        row_ptr.push(cols.len());
    }
    NormalizedAdjacency {
        n,
        row_ptr,
        cols,
        vals,
    }
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Dense product `A_hat * x`. Being symmetric, this also serves as the
    /// transposed product in backward passes.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n, "adjacency/input row mismatch");
        let cols = x.ncols();
        let mut out = Array2::zeros((self.n, cols));
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[k];
                let v = self.vals[k];
                for c in 0..cols {
                    out[[i, c]] += v * x[[j, c]];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                dense[[i, self.cols[k]]] = self.vals[k];
            }
        }
        dense
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::{ConsistencyParams, FrameGrids};
    use crate::flow::{FlowSequence, Velocity};
    use crate::grid::build_scale_specs;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_snapshot(w: usize, h: usize, seed: u64) -> ConsistencySnapshot {
        use crate::grid::{grid_edges, Connectivity};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = build_scale_specs(w * 8, h * 8, 8.0, &[1]).unwrap().remove(0);
        let n = w * h;
        let edges = grid_edges(w, h, Connectivity::Four);
        let ln8 = 8.0f64.ln();
        ConsistencySnapshot {
            spec,
            end_frame: 19,
            node_spatial: (0..n).map(|_| rng.random_range(0.0..ln8)).collect(),
            node_temporal: (0..n).map(|_| rng.random_range(0.0..ln8)).collect(),
            edge_spatial: (0..edges.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            edge_temporal: (0..edges.len()).map(|_| rng.random_range(0.0..ln8)).collect(),
            edges,
        }
    }

    #[test]
    fn graph_counts_match_grid_combinatorics() {
        let g = build_graph(&random_snapshot(3, 3, 1), 8);
        assert_eq!(g.node_count(), 9);
        assert_eq!(g.edge_count(), 12);
        let g1 = build_graph(&random_snapshot(1, 1, 2), 8);
        assert_eq!(g1.node_count(), 1);
        assert_eq!(g1.edge_count(), 0);
    }

    #[test]
    fn graph_features_copied_verbatim() {
        let snap = random_snapshot(4, 3, 7);
        let g = build_graph(&snap, 8);
        for i in 0..g.node_count() {
            assert_eq!(g.node_features[[i, 0]], snap.node_spatial[i]);
            assert_eq!(g.node_features[[i, 1]], snap.node_temporal[i]);
        }
        for k in 0..g.edge_count() {
            assert_eq!(g.edges[k], snap.edges[k]);
            assert_eq!(g.edge_raw[[k, 0]], snap.edge_spatial[k]);
            assert_eq!(g.edge_raw[[k, 1]], snap.edge_temporal[k]);
            let mapped = map_edge_weights([snap.edge_spatial[k], snap.edge_temporal[k]], 8);
            assert_eq!(g.edge_mapped[[k, 0]], mapped[0]);
            assert_eq!(g.edge_mapped[[k, 1]], mapped[1]);
        }
    }

    #[test]
    fn edge_weight_mapping_endpoints_and_affine_point() {
        let ln8 = 8.0f64.ln();
        assert_eq!(map_edge_weights([-1.0, 0.0], 8), [0.0, 0.0]);
        assert_eq!(map_edge_weights([1.0, ln8], 8), [1.0, 1.0]);
        let [s, t] = map_edge_weights([0.5, 2.0f64.ln()], 8);
        assert!((s - 0.75).abs() < 1e-15);
        assert!((t - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn edge_weight_mapping_is_monotone_and_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ln8 = 8.0f64.ln();
        let mut prev: Option<([f64; 2], [f64; 2])> = None;
        for _ in 0..500 {
            let raw = [rng.random_range(-1.0..1.0), rng.random_range(0.0..ln8)];
            let mapped = map_edge_weights(raw, 8);
            assert!(mapped.iter().all(|&x| (0.0..=1.0).contains(&x)));
            // Inverse round-trip.
            let back = [mapped[0] * 2.0 - 1.0, mapped[1] * ln8];
            assert!((back[0] - raw[0]).abs() < 1e-12);
            assert!((back[1] - raw[1]).abs() < 1e-12);
            if let Some((praw, pmapped)) = prev {
                for ch in 0..2 {
                    if praw[ch] < raw[ch] {
                        assert!(pmapped[ch] <= mapped[ch]);
                    }
                }
            }
            prev = Some((raw, mapped));
        }
    }

    #[test]
    fn adjacency_degenerate_cases() {
        let g = build_graph(&random_snapshot(1, 1, 3), 8);
        let a = normalized_adjacency(&g, EdgeChannel::Spatial);
        assert_eq!(a.to_dense(), ndarray::arr2(&[[1.0]]));

        // Two nodes, one edge forced to mapped weight 1 on both channels.
        let mut snap = random_snapshot(2, 1, 4);
        snap.edge_spatial = vec![1.0];
        snap.edge_temporal = vec![8.0f64.ln()];
        let g = build_graph(&snap, 8);
        for channel in [EdgeChannel::Spatial, EdgeChannel::Temporal] {
            let dense = normalized_adjacency(&g, channel).to_dense();
            for &v in dense.iter() {
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
    }

    /// Dense reference: materialize A + I, normalize by explicit row sums.
    fn dense_oracle(g: &MotionGraph, ch: usize) -> Array2<f64> {
        let n = g.node_count();
        let mut a = Array2::<f64>::eye(n);
        for (k, &(i, j)) in g.edges.iter().enumerate() {
            a[[i, j]] = g.edge_mapped[[k, ch]];
            a[[j, i]] = g.edge_mapped[[k, ch]];
        }
        let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] = a[[i, j]] / (d[i] * d[j]).sqrt();
            }
        }
        out
    }

    #[test]
    fn adjacency_matches_dense_oracle_and_spectrum() {
        for seed in 0..10u64 {
            let g = build_graph(&random_snapshot(3, 3, 100 + seed), 8);
            for (channel, ch) in [(EdgeChannel::Spatial, 0), (EdgeChannel::Temporal, 1)] {
                let adj = normalized_adjacency(&g, channel);
                let dense = adj.to_dense();
                let oracle = dense_oracle(&g, ch);
                for (a, b) in dense.iter().zip(oracle.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
                // Symmetry, entry bounds, positive diagonal.
                for i in 0..9 {
                    assert!(dense[[i, i]] > 0.0);
                    for j in 0..9 {
                        assert!((dense[[i, j]] - dense[[j, i]]).abs() < 1e-15);
                        assert!((0.0..=1.0 + 1e-15).contains(&dense[[i, j]]));
                    }
                }
                // Spectral radius <= 1 via power iteration on the dense form.
                let mut v = Array1::from_elem(9, 1.0 / 3.0);
                for _ in 0..200 {
                    let w = dense.dot(&v);
                    let norm = w.dot(&w).sqrt();
                    if norm == 0.0 {
                        break;
                    }
                    v = w / norm;
                }
                let lambda = v.dot(&dense.dot(&v));
                assert!(lambda.abs() <= 1.0 + 1e-9, "spectral radius {lambda}");

                // CSR apply agrees with the dense product.
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Array2::from_shape_fn((9, 4), |_| rng.random_range(-1.0..1.0));
                let fast = adj.apply(&x);
                let slow = dense.dot(&x);
                for (a, b) in fast.iter().zip(slow.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn multi_scale_set_geometry_and_uniform_flow() {
        let (w, h) = (320, 256);
        let frames: Vec<Vec<Velocity>> = (0..4).map(|_| vec![Velocity::new(1.0, 0.0); w * h]).collect();
        let seq = FlowSequence::new(w, h, frames).unwrap();
        let specs = build_scale_specs(w, h, 16.0, &[1, 2, 4]).unwrap();
        let grids = FrameGrids::compute(&seq, &specs).unwrap();
        let window = grids.window(&seq, 4, 1, 3).unwrap();
        let set = build_msmc(&window, &specs, &ConsistencyParams::default()).unwrap();
        assert_eq!(set.graphs.len(), 3);
        assert_eq!(set.graphs[0].node_count(), 20 * 16);
        assert_eq!(set.graphs[1].node_count(), 10 * 8);
        assert_eq!(set.graphs[2].node_count(), 5 * 4);
        for g in &set.graphs {
            assert_eq!(g.end_frame, 3);
            assert!(g.node_features.iter().all(|&x| x == 0.0));
        }

        // A single scale degenerates to build_graph output.
        let single = build_msmc(&window, &specs[..1], &ConsistencyParams::default()).unwrap();
        assert_eq!(single.graphs.len(), 1);
        assert_eq!(single.graphs[0].node_count(), set.graphs[0].node_count());
        assert_eq!(single.graphs[0].edges, set.graphs[0].edges);
    }
}
